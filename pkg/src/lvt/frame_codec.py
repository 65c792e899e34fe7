"""VQ-VAE frame autoencoder with sliced (per-channel-group) codebooks.

The encoder output of width ``D`` is split into ``n_c`` equal slices and each
slice is quantized against its own table of ``K`` rows. Codebooks are not
trained by gradient descent; they follow an exponential moving average of
the encoder outputs assigned to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from lvt import numerics as nx
from lvt.numerics import ParamStore


@dataclass(frozen=True)
class CodecConfig:
    K: int = 64
    D: int = 64
    n_c: int = 2
    H: int = 32
    W: int = 32
    downsample_factor: int = 4
    residual_blocks: int = 2
    hidden: int = 64
    residual_hidden: int = 32
    ema_decay: float = 0.99
    ema_epsilon: float = 1e-5
    commitment: float = 1.0

    def __post_init__(self):
        if self.D % self.n_c:
            raise ValueError(f"D={self.D} is not divisible by n_c={self.n_c}")
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ValueError(f"downsample_factor={f} must be a power of two")
        if self.H % f or self.W % f:
            raise ValueError(f"downsample_factor={f} does not divide frame extents {self.H}x{self.W}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay={self.ema_decay} outside [0, 1)")
        if self.K < 1 or self.K > 65535:
            raise ValueError(f"K={self.K} outside [1, 65535]")

    @property
    def slice_width(self) -> int:
        return self.D // self.n_c

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def latent_hw(self) -> tuple[int, int]:
        return self.H // self.downsample_factor, self.W // self.downsample_factor


@dataclass
class Codebook:
    """``n_c`` tables of shape ``(K, D / n_c)`` with their EMA statistics."""

    tables: torch.Tensor  # (n_c, K, d)
    ema_count: torch.Tensor  # (n_c, K)
    ema_sum: torch.Tensor  # (n_c, K, d)
    decay: float = 0.99
    epsilon: float = 1e-5

    @classmethod
    def init(cls, config: CodecConfig, gen: torch.Generator, dtype=torch.float32) -> "Codebook":
        tables = nx.normal_init((config.n_c, config.K, config.slice_width), 0.02, gen, dtype)
        # count 1 and sum = row keeps row == sum / count from the start
        return cls(
            tables=tables,
            ema_count=torch.ones(config.n_c, config.K, dtype=dtype),
            ema_sum=tables.clone(),
            decay=config.ema_decay,
            epsilon=config.ema_epsilon,
        )

    @property
    def n_c(self) -> int:
        return self.tables.shape[0]

    @property
    def K(self) -> int:
        return self.tables.shape[1]

    def to(self, dtype: torch.dtype) -> "Codebook":
        return Codebook(
            self.tables.to(dtype).clone(),
            self.ema_count.to(dtype).clone(),
            self.ema_sum.to(dtype).clone(),
            self.decay,
            self.epsilon,
        )

    def smoothed_counts(self) -> torch.Tensor:
        n = self.ema_count.sum(dim=1, keepdim=True)
        return (self.ema_count + self.epsilon) / (n + self.K * self.epsilon) * n


@dataclass
class FrameLatent:
    """Codebook indices ``(..., h, w, n_c)`` and optionally the encoder output."""

    indices: torch.Tensor
    activations: torch.Tensor | None = field(default=None, repr=False)


def init_codec_params(config: CodecConfig, seed: int = 0, dtype=torch.float32) -> tuple[ParamStore, Codebook]:
    gen = nx.make_generator(seed)
    store = ParamStore()

    def conv(name, kh, kw, cin, cout):
        store.add(f"{name}.w", nx.he_uniform((kh, kw, cin, cout), kh * kw * cin, gen, dtype))
        store.add(f"{name}.b", torch.zeros(cout, dtype=dtype))

    def res(name, ch):
        conv(f"{name}.conv3", 3, 3, ch, config.residual_hidden)
        conv(f"{name}.conv1", 1, 1, config.residual_hidden, ch)

    cin = 3
    for i in range(config.n_down):
        conv(f"enc.down{i}", 4, 4, cin, config.hidden)
        cin = config.hidden
    conv("enc.proj", 3, 3, cin, config.D)
    for i in range(config.residual_blocks):
        res(f"enc.res{i}", config.D)

    conv("dec.proj", 3, 3, config.D, config.hidden)
    for i in range(config.residual_blocks):
        res(f"dec.res{i}", config.hidden)
    for i in range(config.n_down):
        cout = 3 if i == config.n_down - 1 else config.hidden
        # transposed kernels are (kh, kw, c_out, c_in)
        store.add(f"dec.up{i}.w", nx.he_uniform((4, 4, cout, config.hidden), 16 * config.hidden, gen, dtype))
        store.add(f"dec.up{i}.b", torch.zeros(cout, dtype=dtype))
    return store, Codebook.init(config, gen, dtype)


def _check_frames(frames: torch.Tensor, config: CodecConfig) -> None:
    if frames.dim() != 4 or tuple(frames.shape[1:]) != (config.H, config.W, 3):
        raise ValueError(
            f"frames must be (N, {config.H}, {config.W}, 3), got {tuple(frames.shape)}"
        )


def encode_frames(frames: torch.Tensor, params: ParamStore, config: CodecConfig) -> torch.Tensor:
    """``(N, H, W, 3)`` frames to pre-quantization activations ``(N, h, w, D)``."""
    _check_frames(frames, config)
    x = frames
    for i in range(config.n_down):
        x = nx.relu(nx.conv2d(x, params[f"enc.down{i}.w"], params[f"enc.down{i}.b"], stride=2))
    x = nx.conv2d(x, params["enc.proj.w"], params["enc.proj.b"])
    for i in range(config.residual_blocks):
        x = nx.residual_block(x, params.params, f"enc.res{i}")
    return x


def encode_frame(frame: torch.Tensor, params: ParamStore, config: CodecConfig) -> torch.Tensor:
    if frame.numel() and (float(frame.min()) < 0.0 or float(frame.max()) > 1.0):
        raise ValueError("frame values must lie in [0, 1]")
    return encode_frames(frame[None], params, config)[0]


def decode_frames(z_q: torch.Tensor, params: ParamStore, config: CodecConfig, clamp: bool = False) -> torch.Tensor:
    """``(N, h, w, D)`` embeddings to frames ``(N, H, W, 3)``.

    Training uses the raw output; evaluation passes ``clamp=True``.
    """
    h, w = config.latent_hw
    if z_q.dim() != 4 or tuple(z_q.shape[1:]) != (h, w, config.D):
        raise ValueError(f"latent embeddings must be (N, {h}, {w}, {config.D}), got {tuple(z_q.shape)}")
    x = nx.conv2d(z_q, params["dec.proj.w"], params["dec.proj.b"])
    for i in range(config.residual_blocks):
        x = nx.residual_block(x, params.params, f"dec.res{i}")
    x = nx.relu(x)
    for i in range(config.n_down):
        x = nx.conv2d_transpose(x, params[f"dec.up{i}.w"], params[f"dec.up{i}.b"], stride=2)
        if i < config.n_down - 1:
            x = nx.relu(x)
    return x.clamp(0.0, 1.0) if clamp else x


def decode_frame(z_q: torch.Tensor, params: ParamStore, config: CodecConfig, clamp: bool = True) -> torch.Tensor:
    return decode_frames(z_q[None], params, config, clamp=clamp)[0]


def _split(activations: torch.Tensor, n_c: int) -> torch.Tensor:
    """``(..., D)`` to ``(..., n_c, D / n_c)``."""
    return activations.reshape(*activations.shape[:-1], n_c, activations.shape[-1] // n_c)


def quantize(activations: torch.Tensor, codebook: Codebook, chunk: int = 4096) -> FrameLatent:
    """Nearest row per slice, ties broken toward the lowest index."""
    n_c, K, d = codebook.tables.shape
    if activations.shape[-1] != n_c * d:
        raise ValueError(f"activation width {activations.shape[-1]} != n_c * row width = {n_c * d}")
    flat = _split(activations.detach(), n_c).reshape(-1, n_c, d)
    out = torch.empty(flat.shape[0], n_c, dtype=torch.long)
    tables = codebook.tables.to(flat.dtype)
    for start in range(0, flat.shape[0], chunk):
        part = flat[start : start + chunk]
        # direct squared distances (no norm expansion) so exact ties stay ties
        dist = (part[:, :, None, :] - tables[None]).pow(2).sum(-1)
        out[start : start + chunk] = dist.argmin(dim=-1)
    return FrameLatent(out.reshape(*activations.shape[:-1], n_c), activations)


def dequantize(indices: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """``(..., n_c)`` indices to concatenated rows ``(..., D)``."""
    n_c, K, d = codebook.tables.shape
    if indices.shape[-1] != n_c:
        raise ValueError(f"expected {n_c} index channels, got {indices.shape[-1]}")
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= K):
        raise IndexError(f"codebook index out of range [0, {K})")
    idx = indices.long()
    parts = [codebook.tables[j][idx[..., j]] for j in range(n_c)]
    return torch.cat(parts, dim=-1)


def codec_loss(
    frames: torch.Tensor,
    params: ParamStore,
    codebook: Codebook,
    config: CodecConfig,
) -> tuple[torch.Tensor, torch.Tensor, FrameLatent]:
    """Reconstruction plus commitment loss, summed per frame and averaged over frames.

    The decoder sees the quantized embeddings while gradients are copied
    straight through to the encoder output. The codebook gets no gradient.
    """
    z_e = encode_frames(frames, params, config)
    latent = quantize(z_e, codebook)
    e = nx.stop_gradient(dequantize(latent.indices, codebook).to(z_e.dtype))
    z_q = z_e + nx.stop_gradient(e - z_e)
    recon = decode_frames(z_q, params, config)
    n = frames.shape[0]
    rec_term = (frames - recon).pow(2).reshape(n, -1).sum(1)
    commit_term = (z_e - e).pow(2).reshape(n, -1).sum(1)
    loss = (rec_term + config.commitment * commit_term).mean()
    if not bool(torch.isfinite(loss)):
        raise nx.NumericError("codec_loss is not finite")
    return loss, recon, latent


def ema_update(codebook: Codebook, activations: torch.Tensor, indices: torch.Tensor) -> Codebook:
    """Moves each row toward the mean of the activations assigned to it, in place."""
    n_c, K, d = codebook.tables.shape
    flat = _split(activations.detach(), n_c).reshape(-1, n_c, d).to(codebook.tables.dtype)
    idx = indices.reshape(-1, n_c).long()
    g = codebook.decay
    with torch.no_grad():
        for j in range(n_c):
            counts = torch.bincount(idx[:, j], minlength=K).to(flat.dtype)
            sums = torch.zeros(K, d, dtype=flat.dtype).index_add_(0, idx[:, j], flat[:, j])
            codebook.ema_count[j].mul_(g).add_(counts, alpha=1 - g)
            codebook.ema_sum[j].mul_(g).add_(sums, alpha=1 - g)
        codebook.tables = codebook.ema_sum / codebook.smoothed_counts()[..., None]
    return codebook


def encode_video(video: torch.Tensor, params: ParamStore, codebook: Codebook, config: CodecConfig, batch: int = 64) -> torch.Tensor:
    """``(T, H, W, 3)`` video to a ``(T, h, w, n_c)`` index grid."""
    if video.dim() != 4:
        raise ValueError(f"video must be (T, H, W, 3), got {tuple(video.shape)}")
    for t in range(video.shape[0]):
        frame = video[t]
        if tuple(frame.shape) != (config.H, config.W, 3):
            raise ValueError(f"frame {t}: extents {tuple(frame.shape)} != {(config.H, config.W, 3)}")
        if float(frame.min()) < 0.0 or float(frame.max()) > 1.0:
            raise ValueError(f"frame {t}: values outside [0, 1]")
    dtype = params[next(iter(params.params))].dtype
    out = []
    with torch.no_grad():
        for start in range(0, video.shape[0], batch):
            z_e = encode_frames(video[start : start + batch].to(dtype), params, config)
            out.append(quantize(z_e, codebook).indices)
    return torch.cat(out, 0)


def decode_video(grid: torch.Tensor, params: ParamStore, codebook: Codebook, config: CodecConfig, batch: int = 64) -> torch.Tensor:
    """``(T, h, w, n_c)`` index grid back to a clamped ``(T, H, W, 3)`` video."""
    out = []
    with torch.no_grad():
        for start in range(0, grid.shape[0], batch):
            try:
                z_q = dequantize(grid[start : start + batch], codebook)
            except IndexError as exc:
                bad = next(t for t in range(start, min(start + batch, grid.shape[0]))
                           if int(grid[t].max()) >= codebook.K or int(grid[t].min()) < 0)
                raise IndexError(f"frame {bad}: {exc}") from exc
            out.append(decode_frames(z_q, params, config, clamp=True))
    return torch.cat(out, 0)
