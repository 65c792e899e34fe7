"""Evaluation metrics: bits/dim, MSE, codebook usage and code-change masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch


def bits_per_dim(nll_nats_mean: float) -> float:
    if nll_nats_mean < 0:
        raise ValueError(f"negative log-likelihood must be >= 0, got {nll_nats_mean}")
    return float(nll_nats_mean) / math.log(2.0)


def reconstruction_mse(video, reconstruction) -> float:
    a = torch.as_tensor(video, dtype=torch.float64)
    b = torch.as_tensor(reconstruction, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float((a - b).pow(2).mean())


@dataclass
class CodebookUsage:
    """Per-codebook statistics; arrays have a leading ``n_c`` axis."""

    counts: np.ndarray  # (n_c, K) int
    histogram: np.ndarray  # (n_c, K)
    cumulative: np.ndarray  # (n_c, K) descending-sorted cumulative mass
    mass_count: np.ndarray  # (n_c,) codes covering `mass`
    perplexity: np.ndarray  # (n_c,)
    mass: float = 0.8


def perplexity(histogram: np.ndarray) -> float:
    """``exp`` of the usage entropy; 1 for a single code, ``K`` for uniform use."""
    p = np.asarray(histogram, dtype=np.float64)
    p = p[p > 0]
    return float(np.clip(np.exp(-(p * np.log(p)).sum()), 1.0, None))


def codebook_usage(grids, K: int, mass: float = 0.8) -> CodebookUsage:
    """Usage of each of the ``K`` codes per codebook over ``(..., n_c)`` grids."""
    idx = np.asarray(grids.numpy() if isinstance(grids, torch.Tensor) else grids)
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        raise ValueError(f"indices outside [0, {K})")
    idx = idx.reshape(-1, idx.shape[-1])
    n_c = idx.shape[1]
    counts = np.stack([np.bincount(idx[:, j], minlength=K) for j in range(n_c)])
    total = counts.sum(1, keepdims=True)
    hist = counts / np.maximum(total, 1)
    cum_counts = np.cumsum(-np.sort(-counts, axis=1), axis=1)
    cumulative = cum_counts / np.maximum(total, 1)
    # exact integer comparison so uniform histograms hit the threshold exactly
    frac = Fraction(mass).limit_denominator(10**6)
    reached = cum_counts * frac.denominator >= total * frac.numerator
    mass_count = reached.argmax(axis=1) + 1
    ppl = np.array([perplexity(h) for h in hist])
    return CodebookUsage(counts, hist, cumulative, mass_count, ppl, mass)


def code_change_mask(grid) -> np.ndarray:
    """``(T-1, h, w, n_c)`` ones where a code differs between frames ``t`` and ``t+1``."""
    g = np.asarray(grid.numpy() if isinstance(grid, torch.Tensor) else grid)
    if g.shape[0] < 2:
        raise ValueError("code_change_mask needs at least two frames")
    return (g[1:] != g[:-1]).astype(np.uint8)


def last_frame_baseline(priming, T: int):
    """Repeats the last priming frame up to ``T`` frames."""
    prime = torch.as_tensor(priming)
    T0 = prime.shape[0]
    if T0 < 1:
        raise ValueError("need at least one priming frame")
    if T < T0:
        raise ValueError(f"T={T} shorter than the {T0} priming frames")
    tail = prime[-1:].expand(T - T0, *prime.shape[1:])
    return torch.cat([prime, tail], 0)


@dataclass
class EvalReport:
    bits_per_dim: float | None = None
    mse: float | None = None
    baseline_mse: float | None = None
    generation_mse: float | None = None
    usage_histogram: list[list[float]] = field(default_factory=list)
    perplexity: list[float] = field(default_factory=list)
    mass_count: list[int] = field(default_factory=list)
    config_digest: str = ""

    def flat(self) -> dict[str, object]:
        """Flat key/value view; histograms expand to ``usage.<j>.<i>`` keys."""
        out: dict[str, object] = {}
        for key in ("bits_per_dim", "mse", "baseline_mse", "generation_mse"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        for j, ppl in enumerate(self.perplexity):
            out[f"perplexity.{j}"] = ppl
        for j, n in enumerate(self.mass_count):
            out[f"mass80_count.{j}"] = n
        for j, hist in enumerate(self.usage_histogram):
            for i, p in enumerate(hist):
                out[f"usage.{j}.{i}"] = p
        out["config_digest"] = self.config_digest
        return out
