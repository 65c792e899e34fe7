"""Synthetic sprite videos and the binary file formats.

All integers are little-endian. Layouts:

* video   ``LVTV`` u16 version, u32 T H W C, u8 dtype (0 = u8, 1 = f32), payload
* latent  ``LVTZ`` u16 version, u32 T h w n_c K, u16 payload
* ckpt    ``LVTC`` u16 version, u32 header length, JSON header, raw blobs

Checkpoint headers list every blob as ``[name, dtype, shape, offset, nbytes]``
with offsets relative to the first byte after the header.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, is_dataclass
from pathlib import Path

import numpy as np
import torch

VERSION = 1
_VIDEO_HEAD = struct.Struct("<4sH4IB")
_LATENT_HEAD = struct.Struct("<4sH5I")
_CKPT_HEAD = struct.Struct("<4sHI")
KINDS = ("moving_square", "bouncing_two_squares", "static_noise", "constant_gray")


class FormatError(ValueError):
    """Malformed or truncated file."""


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "moving_square"
    T: int = 16
    H: int = 32
    W: int = 32
    size: int = 8
    velocity: tuple[int, int] = (-2, 2)
    count: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}; expected one of {KINDS}")
        if min(self.T, self.H, self.W, self.size, self.count) < 1:
            raise ValueError("synthetic extents, sprite size and count must be positive")
        if self.size > min(self.H, self.W):
            raise ValueError(f"sprite size {self.size} larger than frame {self.H}x{self.W}")
        if self.velocity[0] > self.velocity[1]:
            raise ValueError(f"empty velocity range {self.velocity}")


def bounce(pos: int, vel: int, limit: int) -> tuple[int, int]:
    """One step of reflective motion on ``[0, limit]``."""
    pos += vel
    while pos < 0 or pos > limit:
        if pos < 0:
            pos, vel = -pos, -vel
        else:
            pos, vel = 2 * limit - pos, -vel
    return pos, vel


def simulate_positions(start, velocity, size: int, extents, T: int) -> list[tuple[int, int]]:
    """Top-left corners of a sprite over ``T`` frames."""
    (y, x), (vy, vx) = start, velocity
    limit_y, limit_x = extents[0] - size, extents[1] - size
    out = []
    for _ in range(T):
        out.append((y, x))
        y, vy = bounce(y, vy, limit_y)
        x, vx = bounce(x, vx, limit_x)
    return out


def synthetic_video(spec: SyntheticSpec, index: int) -> np.ndarray:
    """Video ``index`` of the dataset, ``(T, H, W, 3)`` float32 in ``[0, 1]``."""
    rng = np.random.default_rng([spec.seed, index])
    video = np.zeros((spec.T, spec.H, spec.W, 3), dtype=np.float32)
    if spec.kind == "constant_gray":
        video[:] = 0.5
        return video
    if spec.kind == "static_noise":
        video[:] = rng.random((spec.H, spec.W, 3), dtype=np.float32)
        return video
    sprites = 2 if spec.kind == "bouncing_two_squares" else 1
    for _ in range(sprites):
        start = (int(rng.integers(0, spec.H - spec.size + 1)), int(rng.integers(0, spec.W - spec.size + 1)))
        vel = tuple(int(v) for v in rng.integers(spec.velocity[0], spec.velocity[1] + 1, size=2))
        color = rng.uniform(0.4, 1.0, size=3).astype(np.float32)
        for t, (y, x) in enumerate(simulate_positions(start, vel, spec.size, (spec.H, spec.W), spec.T)):
            video[t, y : y + spec.size, x : x + spec.size] = color
    return video


class SyntheticDataset:
    """Lazily generated, index-addressable synthetic videos."""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec

    def __len__(self) -> int:
        return self.spec.count

    def __getitem__(self, index: int) -> np.ndarray:
        if not 0 <= index < len(self):
            raise IndexError(index)
        return synthetic_video(self.spec, index)


def generate_synthetic(spec: SyntheticSpec) -> np.ndarray:
    """Every video of ``spec`` stacked into ``(count, T, H, W, 3)``."""
    return np.stack([synthetic_video(spec, i) for i in range(spec.count)])


# ---------------------------------------------------------------------------
# Video and latent files


def _read(path) -> bytes:
    return Path(path).read_bytes()


def _expect_magic(data: bytes, magic: bytes, what: str) -> None:
    if len(data) < 4 or data[:4] != magic:
        raise FormatError(f"{what}: bad magic at byte 0: expected {magic!r}, got {data[:4]!r}")


def _expect_version(version: int, what: str) -> None:
    if version != VERSION:
        raise FormatError(f"{what}: unsupported version {version} at byte 4 (expected {VERSION})")


def encode_video_bytes(video, dtype: str = "f32") -> bytes:
    arr = np.asarray(video.numpy() if isinstance(video, torch.Tensor) else video)
    if arr.ndim != 4:
        raise ValueError(f"video must be (T, H, W, C), got shape {arr.shape}")
    if dtype == "u8":
        payload = arr.astype(np.uint8) if arr.dtype == np.uint8 else np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
        tag = 0
    elif dtype == "f32":
        payload = arr.astype("<f4")
        tag = 1
    else:
        raise ValueError(f"unknown video dtype {dtype!r}")
    return _VIDEO_HEAD.pack(b"LVTV", VERSION, *arr.shape, tag) + payload.tobytes()


def decode_video_bytes(data: bytes) -> np.ndarray:
    """Returns float32 ``(T, H, W, C)``; u8 payloads are scaled into ``[0, 1]``."""
    _expect_magic(data, b"LVTV", "video file")
    if len(data) < _VIDEO_HEAD.size:
        raise FormatError(f"video file: truncated header: expected {_VIDEO_HEAD.size} bytes, got {len(data)}")
    _, version, T, H, W, C, tag = _VIDEO_HEAD.unpack_from(data)
    _expect_version(version, "video file")
    if tag not in (0, 1):
        raise FormatError(f"video file: unknown dtype tag {tag} at byte 22")
    itemsize = 1 if tag == 0 else 4
    expected = T * H * W * C * itemsize
    actual = len(data) - _VIDEO_HEAD.size
    if actual != expected:
        raise FormatError(f"video file: payload at byte {_VIDEO_HEAD.size}: expected {expected} bytes, got {actual}")
    raw = np.frombuffer(data, dtype=np.uint8 if tag == 0 else "<f4", offset=_VIDEO_HEAD.size)
    arr = raw.reshape(T, H, W, C)
    return (arr.astype(np.float32) / 255.0) if tag == 0 else arr.astype(np.float32)


def write_video(path, video, dtype: str = "f32") -> None:
    Path(path).write_bytes(encode_video_bytes(video, dtype))


def read_video(path) -> np.ndarray:
    return decode_video_bytes(_read(path))


def encode_latent_bytes(grid, K: int) -> bytes:
    arr = np.asarray(grid.numpy() if isinstance(grid, torch.Tensor) else grid)
    if arr.ndim != 4:
        raise ValueError(f"latent grid must be (T, h, w, n_c), got shape {arr.shape}")
    if not 1 <= K <= 65535:
        raise ValueError(f"K={K} does not fit u16 indices")
    if arr.size and (arr.min() < 0 or arr.max() >= K):
        raise ValueError(f"latent indices outside [0, {K})")
    return _LATENT_HEAD.pack(b"LVTZ", VERSION, *arr.shape, K) + arr.astype("<u2").tobytes()


def decode_latent_bytes(data: bytes) -> tuple[np.ndarray, int]:
    _expect_magic(data, b"LVTZ", "latent file")
    if len(data) < _LATENT_HEAD.size:
        raise FormatError(f"latent file: truncated header: expected {_LATENT_HEAD.size} bytes, got {len(data)}")
    _, version, T, h, w, n_c, K = _LATENT_HEAD.unpack_from(data)
    _expect_version(version, "latent file")
    expected = T * h * w * n_c * 2
    actual = len(data) - _LATENT_HEAD.size
    if actual != expected:
        raise FormatError(f"latent file: payload at byte {_LATENT_HEAD.size}: expected {expected} bytes, got {actual}")
    arr = np.frombuffer(data, dtype="<u2", offset=_LATENT_HEAD.size).reshape(T, h, w, n_c).astype(np.int64)
    if arr.size and arr.max() >= K:
        bad = int(np.argmax(arr.reshape(-1) >= K))
        raise FormatError(f"latent file: index {arr.reshape(-1)[bad]} >= K={K} at byte {_LATENT_HEAD.size + 2 * bad}")
    return arr, K


def write_latent(path, grid, K: int) -> None:
    Path(path).write_bytes(encode_latent_bytes(grid, K))


def read_latent(path) -> tuple[np.ndarray, int]:
    return decode_latent_bytes(_read(path))


# ---------------------------------------------------------------------------
# Checkpoints


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_digest(config) -> str:
    """SHA-256 of the canonical JSON form of a config (dataclass or dict)."""
    text = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    """Everything needed to resume: tensors by name plus JSON metadata."""

    kind: str
    config: dict
    tensors: dict[str, torch.Tensor]
    step: int = 0
    extra: dict | None = None

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def encode_checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    blobs, index, offset = [], [], 0
    for name, t in ckpt.tensors.items():
        t = t.detach().contiguous()
        if t.dtype not in _DTYPES:
            raise ValueError(f"tensor {name!r}: unsupported dtype {t.dtype}")
        raw = t.numpy().astype(_DTYPES[t.dtype]).tobytes()
        index.append([name, _DTYPES[t.dtype], list(t.shape), offset, len(raw)])
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"kind": ckpt.kind, "config": _jsonable(ckpt.config), "digest": ckpt.digest, "step": ckpt.step,
         "extra": ckpt.extra or {}, "blobs": index},
        sort_keys=True,
    ).encode()
    return _CKPT_HEAD.pack(b"LVTC", VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint_bytes(data: bytes) -> Checkpoint:
    _expect_magic(data, b"LVTC", "checkpoint")
    if len(data) < _CKPT_HEAD.size:
        raise FormatError(f"checkpoint: truncated header: expected {_CKPT_HEAD.size} bytes, got {len(data)}")
    _, version, hlen = _CKPT_HEAD.unpack_from(data)
    _expect_version(version, "checkpoint")
    start = _CKPT_HEAD.size + hlen
    if len(data) < start:
        raise FormatError(f"checkpoint: JSON header at byte {_CKPT_HEAD.size}: expected {hlen} bytes, got {len(data) - _CKPT_HEAD.size}")
    try:
        header = json.loads(data[_CKPT_HEAD.size : start])
    except json.JSONDecodeError as exc:
        raise FormatError(f"checkpoint: corrupt JSON header at byte {_CKPT_HEAD.size + exc.pos}") from exc
    tensors = {}
    for name, dt, shape, off, nbytes in header["blobs"]:
        lo, hi = start + off, start + off + nbytes
        if hi > len(data):
            raise FormatError(f"checkpoint: blob {name!r} at byte {lo}: expected {nbytes} bytes, got {max(len(data) - lo, 0)}")
        arr = np.frombuffer(data[lo:hi], dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.dtype(dt).newbyteorder("=")))
    expected_end = start + sum(b[4] for b in header["blobs"])
    if len(data) != expected_end:
        raise FormatError(f"checkpoint: {len(data) - expected_end} trailing bytes after byte {expected_end}")
    ckpt = Checkpoint(header["kind"], header["config"], tensors, header["step"], header.get("extra") or None)
    if ckpt.digest != header["digest"]:
        raise FormatError("checkpoint: config digest mismatch")
    return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint_bytes(_read(path))


# ---------------------------------------------------------------------------
# Portable pixmaps


def write_ppm(path, image) -> None:
    """``(H, W, 3)`` image in ``[0, 1]`` (or uint8) as binary P6."""
    arr = np.asarray(image.numpy() if isinstance(image, torch.Tensor) else image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8)
    H, W = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + arr.reshape(H, W, 3).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 pixmap to uint8 ``(H, W, 3)``."""
    data = _read(path)
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"pixmap: truncated header at byte {pos}")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"pixmap: bad magic at byte 0: expected b'P6', got {fields[0]!r}")
    W, H, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise FormatError(f"pixmap: unsupported maxval {maxval}")
    pos += 1
    expected = W * H * 3
    if len(data) - pos != expected:
        raise FormatError(f"pixmap: payload at byte {pos}: expected {expected} bytes, got {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(H, W, 3).copy()


def export_frames(directory, video, prefix: str = "frame") -> list[Path]:
    """One pixmap per frame plus ``index.txt`` listing them in order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for t in range(len(video)):
        name = f"{prefix}_{t:04d}.ppm"
        write_ppm(d / name, video[t])
        names.append(name)
    (d / "index.txt").write_text("\n".join(names) + "\n")
    return [d / n for n in names]


def import_frames(directory) -> np.ndarray:
    d = Path(directory)
    names = [n for n in (d / "index.txt").read_text().split() if n]
    return np.stack([read_ppm(d / n) for n in names]).astype(np.float32) / 255.0


def write_report(stem, report, digest: str | None = None) -> tuple[Path, Path]:
    """Writes ``<stem>.txt`` (key=value lines) and ``<stem>.json``."""
    flat = report.flat() if hasattr(report, "flat") else dict(report)
    if digest is not None:
        flat["config_digest"] = digest
    stem = Path(stem)
    txt, js = stem.with_suffix(".txt"), stem.with_suffix(".json")
    txt.write_text("".join(f"{k}={v}\n" for k, v in flat.items()))
    structured = _jsonable(report) if is_dataclass(report) else dict(flat)
    structured["config_digest"] = flat.get("config_digest", "")
    js.write_text(json.dumps(structured, indent=2, sort_keys=True))
    return txt, js
