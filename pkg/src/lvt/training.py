"""Training loops for the frame codec and the latent transformer."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from lvt import frame_codec as fc
from lvt import latent_transformer as lt
from lvt import metrics
from lvt import numerics as nx
from lvt.data_io import Checkpoint

logger = logging.getLogger(__name__)


class CsvLog:
    """Append-only ``step,loss,bits_per_dim,wall_clock`` log."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows: list[tuple[int, float, float, float]] = []
        self._t0 = time.perf_counter()
        if self.path and not self.path.exists():
            self.path.write_text("step,loss,bits_per_dim,wall_clock\n")

    def __call__(self, step: int, loss: float, bpd: float = float("nan")) -> None:
        row = (step, loss, bpd, time.perf_counter() - self._t0)
        self.rows.append(row)
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow([row[0], f"{row[1]:.8g}", f"{row[2]:.8g}", f"{row[3]:.3f}"])


def _frame_batch(videos, rng: np.random.Generator, batch: int) -> torch.Tensor:
    vids = rng.integers(0, len(videos), size=batch)
    frames = []
    for v in vids:
        video = videos[int(v)]
        frames.append(video[int(rng.integers(0, len(video)))])
    return torch.from_numpy(np.stack(frames))


@dataclass
class CodecState:
    config: fc.CodecConfig
    params: nx.ParamStore
    codebook: fc.Codebook
    history: list = field(default_factory=list)


def codec_step(state: CodecState, frames: torch.Tensor, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> float:
    """One Adam step on the encoder/decoder followed by the EMA codebook update."""
    loss, _, latent = fc.codec_loss(frames, state.params, state.codebook, state.config)
    grads = nx.backward(loss, state.params)
    nx.adam_step(state.params, grads, lr, betas[0], betas[1], eps)
    fc.ema_update(state.codebook, latent.activations, latent.indices)
    return float(loss.detach())


def train_codec(
    videos,
    config: fc.CodecConfig,
    steps: int,
    batch: int = 32,
    lr: float = 3e-4,
    seed: int = 0,
    log: CsvLog | None = None,
    log_every: int = 50,
    state: CodecState | None = None,
    dtype=torch.float32,
    stop: Callable[[int, CodecState], bool] | None = None,
) -> CodecState:
    """Trains on random frames drawn from ``videos`` (any indexable of ``(T, H, W, 3)``)."""
    if state is None:
        params, codebook = fc.init_codec_params(config, seed, dtype)
        state = CodecState(config, params, codebook)
    for _ in range(steps):
        # batches are keyed on (seed, step) so resuming from a checkpoint replays the same stream
        rng = np.random.default_rng([seed, state.params.step])
        frames = _frame_batch(videos, rng, batch).to(dtype)
        loss = codec_step(state, frames, lr)
        step = state.params.step
        per_pixel = loss / (config.H * config.W * 3)
        state.history.append(loss)
        if log is not None and (step % log_every == 0 or step == 1):
            log(step, per_pixel)
        if stop is not None and stop(step, state):
            break
    return state


def codec_reconstruction_mse(state: CodecState, videos, indices: Sequence[int]) -> float:
    """Mean clamped-reconstruction MSE over whole videos."""
    total, count = 0.0, 0
    for i in indices:
        video = torch.from_numpy(np.asarray(videos[i]))
        grid = fc.encode_video(video, state.params, state.codebook, state.config)
        recon = fc.decode_video(grid, state.params, state.codebook, state.config)
        total += metrics.reconstruction_mse(video, recon) * video.numel()
        count += video.numel()
    return total / count


def encode_dataset(state: CodecState, videos, indices: Sequence[int]) -> torch.Tensor:
    return torch.stack([
        fc.encode_video(torch.from_numpy(np.asarray(videos[i])), state.params, state.codebook, state.config)
        for i in indices
    ])


@dataclass
class LvtState:
    config: lt.TransformerConfig
    params: nx.ParamStore
    history: list = field(default_factory=list)


def lvt_step(state: LvtState, grids: torch.Tensor, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> float:
    loss = lt.nll_loss(state.params, state.config, grids)
    if not bool(torch.isfinite(loss)):
        raise nx.NumericError(f"non-finite transformer loss at step {state.params.step + 1}")
    grads = nx.backward(loss, state.params)
    nx.adam_step(state.params, grads, lr, betas[0], betas[1], eps)
    return float(loss.detach())


def train_lvt(
    grids: torch.Tensor,
    config: lt.TransformerConfig,
    steps: int,
    batch: int = 1,
    lr: float = 1e-3,
    seed: int = 0,
    log: CsvLog | None = None,
    log_every: int = 50,
    state: LvtState | None = None,
    dtype=torch.float32,
) -> LvtState:
    """Teacher-forced maximum likelihood on ``(N, T, h, w, n_c)`` latent grids."""
    if state is None:
        state = LvtState(config, lt.init_params(config, seed, dtype))
    for _ in range(steps):
        rng = np.random.default_rng([seed, state.params.step, 1])
        pick = torch.from_numpy(rng.integers(0, grids.shape[0], size=batch))
        loss = lvt_step(state, grids[pick], lr)
        step = state.params.step
        state.history.append(loss)
        if log is not None and (step % log_every == 0 or step == 1):
            log(step, loss, metrics.bits_per_dim(max(loss, 0.0)))
    return state


def evaluate_bpd(state: LvtState, grids: torch.Tensor, prime_frames: int | None = None, batch: int = 4) -> float:
    """Bits/dim over non-priming positions of ``grids``."""
    total, n = 0.0, 0
    with torch.no_grad():
        for start in range(0, grids.shape[0], batch):
            part = grids[start : start + batch]
            total += float(lt.nll_loss(state.params, state.config, part, prime_frames)) * part.shape[0]
            n += part.shape[0]
    return metrics.bits_per_dim(total / n)


# ---------------------------------------------------------------------------
# Checkpoint conversion


def codec_checkpoint(state: CodecState, extra: dict | None = None) -> Checkpoint:
    tensors = dict(state.params.state())
    tensors["codebook/tables"] = state.codebook.tables
    tensors["codebook/ema_count"] = state.codebook.ema_count
    tensors["codebook/ema_sum"] = state.codebook.ema_sum
    return Checkpoint("codec", {"codec": asdict(state.config)}, tensors, state.params.step, extra)


def codec_from_checkpoint(ckpt: Checkpoint) -> CodecState:
    if ckpt.kind != "codec":
        raise ValueError(f"expected a codec checkpoint, got {ckpt.kind!r}")
    config = fc.CodecConfig(**ckpt.config["codec"])
    blobs = {k: v for k, v in ckpt.tensors.items() if not k.startswith("codebook/")}
    params = nx.ParamStore.from_state(blobs, ckpt.step)
    codebook = fc.Codebook(
        ckpt.tensors["codebook/tables"].clone(),
        ckpt.tensors["codebook/ema_count"].clone(),
        ckpt.tensors["codebook/ema_sum"].clone(),
        config.ema_decay,
        config.ema_epsilon,
    )
    return CodecState(config, params, codebook)


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def lvt_checkpoint(state: LvtState, extra: dict | None = None) -> Checkpoint:
    return Checkpoint("lvt", {"lvt": asdict(state.config)}, state.params.state(), state.params.step, extra)


def lvt_from_checkpoint(ckpt: Checkpoint) -> LvtState:
    if ckpt.kind != "lvt":
        raise ValueError(f"expected an lvt checkpoint, got {ckpt.kind!r}")
    config = lt.TransformerConfig(**_tuples(ckpt.config["lvt"]))
    return LvtState(config, nx.ParamStore.from_state(ckpt.tensors, ckpt.step))
