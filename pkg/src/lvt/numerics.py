"""Tensor kernels, parameter storage and the Adam optimizer.

All image tensors use NHWC layout and convolution kernels are stored as
``(kh, kw, c_in, c_out)``. Gradients come from torch's define-by-run tape;
``stop_gradient`` is the only way to cut it.
"""

from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

PADDINGS = ("same", "valid", "causal-mask")


class NumericError(ValueError):
    """Raised for non-finite values where a finite tensor is required."""


def configure_runtime(threads: int | None = None) -> None:
    """Pins torch to deterministic kernels and a fixed thread count.

    ``LVT_THREADS`` is consulted when ``threads`` is not given.
    """
    if threads is None:
        env = os.environ.get("LVT_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"{what}: non-finite input")


def _same_pad(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def causal_kernel_mask(kh: int, kw: int, dtype=torch.float64) -> torch.Tensor:
    """1 for taps strictly before the kernel center in raster order."""
    mask = torch.zeros(kh, kw, dtype=dtype)
    cy, cx = kh // 2, kw // 2
    for y in range(kh):
        for x in range(kw):
            if y < cy or (y == cy and x < cx):
                mask[y, x] = 1.0
    return mask


def conv2d(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> torch.Tensor:
    """2-D convolution on NHWC input with a ``(kh, kw, c_in, c_out)`` kernel.

    ``same`` pads like TensorFlow (output extent ``ceil(size / stride)``),
    ``valid`` does not pad, and ``causal-mask`` is ``same`` padding with
    every tap at or after the kernel center zeroed.
    """
    if padding not in PADDINGS:
        raise ValueError(f"unknown padding {padding!r}; expected one of {PADDINGS}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.dim() != 4 or kernel.dim() != 4 or x.shape[3] != kernel.shape[2]:
        raise ValueError(
            f"conv2d shape mismatch: input {tuple(x.shape)} vs kernel {tuple(kernel.shape)}"
        )
    kh, kw = kernel.shape[0], kernel.shape[1]
    if padding == "causal-mask":
        kernel = kernel * causal_kernel_mask(kh, kw, kernel.dtype)[:, :, None, None]
    xc = x.permute(0, 3, 1, 2)
    if padding != "valid":
        top, bottom = _same_pad(x.shape[1], kh, stride)
        left, right = _same_pad(x.shape[2], kw, stride)
        xc = F.pad(xc, (left, right, top, bottom))
    if xc.shape[2] < kh or xc.shape[3] < kw:
        raise ValueError(
            f"conv2d shape mismatch: input {tuple(x.shape)} vs kernel {tuple(kernel.shape)}"
        )
    out = F.conv2d(xc, kernel.permute(3, 2, 0, 1), bias, stride=stride)
    return out.permute(0, 2, 3, 1)


def conv2d_transpose(
    x: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
) -> torch.Tensor:
    """Adjoint of :func:`conv2d` with the same kernel.

    The kernel is ``(kh, kw, c_out, c_in)`` where ``c_in`` matches the input
    channels, i.e. the kernel of the forward convolution this transposes.
    With ``same`` the output extent is ``size * stride``.
    """
    if padding not in ("same", "valid"):
        raise ValueError(f"conv2d_transpose supports same/valid, got {padding!r}")
    if x.dim() != 4 or kernel.dim() != 4 or x.shape[3] != kernel.shape[3]:
        raise ValueError(
            f"conv2d_transpose shape mismatch: input {tuple(x.shape)} "
            f"vs kernel {tuple(kernel.shape)}"
        )
    kh, kw = kernel.shape[0], kernel.shape[1]
    out = F.conv_transpose2d(x.permute(0, 3, 1, 2), kernel.permute(3, 2, 0, 1), stride=stride)
    if padding == "same":
        th, tw = x.shape[1] * stride, x.shape[2] * stride
        top = max(kh - stride, 0) // 2
        left = max(kw - stride, 0) // 2
        out = out[:, :, top : top + th, left : left + tw]
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out.permute(0, 2, 3, 1)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def residual_block(x: torch.Tensor, params: Mapping[str, torch.Tensor], prefix: str) -> torch.Tensor:
    """``x + conv1x1(relu(conv3x3(relu(x))))``."""
    h = conv2d(relu(x), params[f"{prefix}.conv3.w"], params[f"{prefix}.conv3.b"])
    h = conv2d(relu(h), params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"])
    return x + h


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _check_finite(x, "softmax")
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=axis)


def cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-element ``-ln p(target)`` for logits ``(..., K)`` and targets ``(...)``."""
    _check_finite(logits, "cross_entropy")
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, target.long().unsqueeze(-1)).squeeze(-1)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def embedding_lookup(table: torch.Tensor, indices: torch.Tensor) -> torch.Tensor:
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    return table[indices.long()]


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity on the forward pass, zero gradient on the backward pass."""
    return x.detach()


def layer_norm(x: torch.Tensor, gain: torch.Tensor, shift: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), gain, shift, eps)


# ---------------------------------------------------------------------------
# Parameters


def he_uniform(shape: Sequence[int], fan_in: int, gen: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(tuple(shape), generator=gen, dtype=torch.float64) * 2 - 1).mul_(bound).to(dtype)


def normal_init(shape: Sequence[int], std: float, gen: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).mul_(std).to(dtype)


@dataclass
class ParamStore:
    """Named trainable tensors plus Adam moment accumulators."""

    params: dict[str, torch.Tensor] = field(default_factory=dict)
    first_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: torch.Tensor) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = value.detach().clone().requires_grad_(True)
        self.params[name] = value
        self.first_moment[name] = torch.zeros_like(value, requires_grad=False)
        self.second_moment[name] = torch.zeros_like(value, requires_grad=False)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def to(self, dtype: torch.dtype) -> "ParamStore":
        """Returns a copy with every tensor cast to ``dtype``."""
        out = ParamStore(step=self.step)
        for name, p in self.params.items():
            out.params[name] = p.detach().to(dtype).clone().requires_grad_(True)
            out.first_moment[name] = self.first_moment[name].to(dtype).clone()
            out.second_moment[name] = self.second_moment[name].to(dtype).clone()
        return out

    def state(self) -> dict[str, torch.Tensor]:
        """Flat name -> tensor mapping covering parameters and optimizer moments."""
        out: dict[str, torch.Tensor] = {}
        for name, p in self.params.items():
            out[f"param/{name}"] = p.detach()
            out[f"adam_m/{name}"] = self.first_moment[name]
            out[f"adam_v/{name}"] = self.second_moment[name]
        return out

    @classmethod
    def from_state(cls, blobs: Mapping[str, torch.Tensor], step: int) -> "ParamStore":
        store = cls(step=step)
        for key, value in blobs.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                store.params[name] = value.detach().clone().requires_grad_(True)
        for name in store.params:
            store.first_moment[name] = blobs[f"adam_m/{name}"].clone()
            store.second_moment[name] = blobs[f"adam_v/{name}"].clone()
        return store


def backward(loss: torch.Tensor, store: ParamStore, names: Iterable[str] | None = None) -> dict[str, torch.Tensor]:
    """Gradients of a scalar ``loss`` for every named parameter.

    Parameters the loss does not depend on get a zero gradient and a warning.
    """
    if loss.numel() != 1:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(store.params) if names is None else list(names)
    tensors = [store.params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out: dict[str, torch.Tensor] = {}
    missing = []
    for name, t, g in zip(names, tensors, grads):
        if g is None:
            missing.append(name)
            g = torch.zeros_like(t)
        out[name] = g.detach()
    if missing:
        warnings.warn(f"parameters not on the graph, zero gradient: {', '.join(missing)}", stacklevel=2)
    return out


def adam_step(
    store: ParamStore,
    grads: Mapping[str, torch.Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Bias-corrected Adam update in place. Returns False if the step was skipped."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            logger.warning("adam_step: non-finite gradient for %s, step %d skipped", name, store.step + 1)
            return False
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = store.params[name]
            m = store.first_moment[name]
            v = store.second_moment[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return True
