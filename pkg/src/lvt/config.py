"""Flat ``key = value`` run configuration with ``include`` support.

Keys are ``<section>.<field>``; sections are ``data``, ``codec``, ``lvt``,
``sampler`` and ``train``, plus the top-level ``seed``. Tuples are written
comma-separated (``lvt.factor = 16,1,1``). ``include = other.cfg`` pulls in
another file relative to the including one; later keys win.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from lvt.data_io import SyntheticSpec, config_digest
from lvt.frame_codec import CodecConfig
from lvt.latent_transformer import TransformerConfig
from lvt.sampler import SamplerConfig


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class TrainConfig:
    codec_steps: int = 5000
    codec_batch: int = 32
    codec_lr: float = 3e-4
    lvt_steps: int = 2000
    lvt_batch: int = 1
    lvt_lr: float = 1e-3
    lvt_videos: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 50


# lvt keys that are derived from the codec and data sections
_DERIVED = {"K", "n_c", "extents"}


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    codec: CodecConfig = field(default_factory=CodecConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    @property
    def digest(self) -> str:
        return config_digest(self)


_SECTIONS = {"data": SyntheticSpec, "codec": CodecConfig, "lvt": TransformerConfig,
             "sampler": SamplerConfig, "train": TrainConfig}


def read_pairs(path, _seen: tuple = ()) -> dict[str, str]:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "include":
            pairs.update(read_pairs(path.parent / value, _seen + (path,)))
        else:
            pairs[key] = value
    return pairs


def _convert(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, float, str):
            return typ(raw)
        if origin is tuple:
            inner = typing.get_args(typ)[0]
            return tuple(inner(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from exc
    raise ConfigError(f"{key}: unsupported field type {typ}")


def _build(cls, values: dict[str, str], section: str, **fixed):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = dict(fixed)
    for key, raw in values.items():
        if key not in names or key in fixed:
            raise ConfigError(f"unknown key {section}.{key}")
        kwargs[key] = _convert(raw, hints[key], f"{section}.{key}")
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def from_pairs(pairs: dict[str, str]) -> RunConfig:
    grouped: dict[str, dict[str, str]] = {s: {} for s in _SECTIONS}
    seed = 0
    for key, value in pairs.items():
        if key == "seed":
            seed = int(_convert(value, int, key))
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown key {key}")
        grouped[section][name] = value
    data = _build(SyntheticSpec, grouped["data"], "data")
    codec = _build(CodecConfig, grouped["codec"], "codec")
    if (codec.H, codec.W) != (data.H, data.W):
        raise ConfigError(f"codec frame {codec.H}x{codec.W} != data frame {data.H}x{data.W}")
    h, w = codec.latent_hw
    for key in _DERIVED:
        if key in grouped["lvt"]:
            raise ConfigError(f"lvt.{key} is derived from the codec and data sections")
    transformer = _build(TransformerConfig, grouped["lvt"], "lvt", K=codec.K, n_c=codec.n_c, extents=(data.T, h, w))
    sampler = _build(SamplerConfig, grouped["sampler"], "sampler")
    if sampler.frames != data.T:
        raise ConfigError(f"sampler.frames={sampler.frames} != data.T={data.T}")
    train = _build(TrainConfig, grouped["train"], "train")
    return RunConfig(data, codec, transformer, sampler, train, seed)


def load_config(path) -> RunConfig:
    return from_pairs(read_pairs(path))


def to_text(config: RunConfig) -> str:
    """Serializes a config so that ``load_config`` reproduces it."""
    lines = [f"seed = {config.seed}"]
    for section, obj in (("data", config.data), ("codec", config.codec), ("lvt", config.transformer),
                         ("sampler", config.sampler), ("train", config.train)):
        for f in fields(obj):
            if section == "lvt" and f.name in _DERIVED:
                continue
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
