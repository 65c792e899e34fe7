"""Autoregressive generation of latent frames, then decoding to pixels."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from lvt import frame_codec as fc
from lvt import latent_transformer as lt
from lvt import numerics as nx


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 1.0
    seed: int = 0
    prime_frames: int = 5
    frames: int = 16
    greedy: bool = False
    cached: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 1 <= self.prime_frames < self.frames:
            raise ValueError(f"need 1 <= prime_frames < frames, got {self.prime_frames}, {self.frames}")


def sample_symbol(logits: torch.Tensor, temperature: float, gen: torch.Generator | None, greedy: bool = False) -> int:
    """One categorical draw from ``softmax(logits / temperature)``.

    Inverse-CDF sampling on a single uniform draw keeps the random stream
    consumption fixed at one number per symbol.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = logits.detach().reshape(-1).to(torch.float64)
    if bool(torch.isnan(logits).any()):
        raise nx.NumericError("sample_symbol: NaN logits")
    if not bool(torch.isfinite(logits).any()):
        raise nx.NumericError("sample_symbol: every logit is -inf")
    if greedy:
        return int(logits.argmax())
    probs = torch.softmax(logits / temperature, dim=0)
    cdf = torch.cumsum(probs, 0)
    u = float(torch.rand((), generator=gen, dtype=torch.float64)) * float(cdf[-1])
    idx = int(torch.searchsorted(cdf, torch.tensor([u], dtype=torch.float64), right=True)[0])
    return min(idx, logits.numel() - 1)


def generate_latents(
    params,
    config: lt.TransformerConfig,
    priming: torch.Tensor,
    sampler: SamplerConfig,
    events: list | None = None,
) -> torch.Tensor:
    """Samples a ``(T, h, w, n_c)`` grid whose first ``T0`` frames are ``priming``.

    Walks slices in subscale order, positions in raster order and channels
    in ascending order. Priming positions are never sampled. When
    ``events`` is a list, every ``((t, y, x), channel)`` draw is appended.
    """
    T, h, w = config.extents
    T0 = sampler.prime_frames
    if sampler.frames != T:
        raise ValueError(f"sampler frames={sampler.frames} != model extent T={T}")
    if tuple(priming.shape) != (T0, h, w, config.n_c):
        raise ValueError(f"priming grid must be ({T0}, {h}, {w}, {config.n_c}), got {tuple(priming.shape)}")
    geo = lt.config_geometry(config, T0)
    plan = geo.plan
    gen = nx.make_generator(sampler.seed)
    grid = torch.full((1, T, h, w, config.n_c), config.pad, dtype=torch.long)
    grid[0, :T0] = priming.long()
    flat = grid.view(1, -1, config.n_c)

    with torch.no_grad():
        for sid in range(len(plan.slices)):
            positions = plan.slice_positions(sid)
            if all(p[0] < T0 for p in positions):
                continue
            context = None
            for r, p in enumerate(positions):
                if p[0] < T0:
                    continue
                off = int(geo.slice_pos[sid, r])
                state = None
                for k in range(config.n_c):
                    if sampler.cached:
                        if context is None:
                            context, _ = lt.encode_context(params, config, grid, sid, T0)
                        if state is None:
                            state = lt.decoder_states(params, config, grid, context, geo, torch.tensor([sid]))[:, 0, r]
                        logits = lt.head_logits(params, config, state, flat[:, off], k)
                    else:
                        ctx, _ = lt.encode_context(params, config, grid, sid, T0)
                        logits = lt.decode_logits(params, config, grid, ctx, sid, r, k, T0)
                    flat[0, off, k] = sample_symbol(logits[0], sampler.temperature, gen, sampler.greedy)
                    if events is not None:
                        events.append((p, k))
    return grid[0]


def generate(
    priming_video: torch.Tensor,
    codec_params,
    codebook: fc.Codebook,
    codec_config: fc.CodecConfig,
    params,
    config: lt.TransformerConfig,
    sampler: SamplerConfig,
    events: list | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Encodes the priming frames, samples the rest and decodes every frame.

    Returns ``(video, grid)``; the first ``T0`` output frames are the codec
    reconstruction of the priming frames.
    """
    if priming_video.shape[0] != sampler.prime_frames:
        raise ValueError(f"expected {sampler.prime_frames} priming frames, got {priming_video.shape[0]}")
    priming = fc.encode_video(priming_video, codec_params, codebook, codec_config)
    grid = generate_latents(params, config, priming, sampler, events)
    return fc.decode_video(grid, codec_params, codebook, codec_config), grid
