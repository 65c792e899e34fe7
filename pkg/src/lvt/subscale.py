"""Subscale slicing of a latent video and the generation order it induces.

A factor ``(s_t, s_h, s_w)`` splits a ``(T, h, w)`` grid into ``s_t*s_h*s_w``
interleaved slices; slice ``(a, b, c)`` holds positions
``(a + i*s_t, b + j*s_h, c + k*s_w)``. Slices are generated in lexicographic
order and positions inside a slice in raster order.

Masks come in two flavours. The context encoder sees whole slices: a
position's *level* is its slice index, or -1 for priming frames, and a key is
visible to a query when its level is not greater. The decoder works inside
one slice and a query of rank ``r`` sees keys of rank ``< r``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class SubscaleFactor:
    s_t: int = 1
    s_h: int = 1
    s_w: int = 1

    def __post_init__(self):
        for axis, v in zip("thw", self.as_tuple()):
            if int(v) < 1:
                raise ValueError(f"subscale factor s_{axis}={v} must be positive")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.s_t, self.s_h, self.s_w)

    @property
    def num_slices(self) -> int:
        return self.s_t * self.s_h * self.s_w


@dataclass(frozen=True)
class CausalMaskSpec:
    """Boolean visibility ``visible[q, k]`` between query and key positions.

    Positions are ``(t, y, x)`` triples; rows follow ``queries`` and columns
    follow ``keys``.
    """

    queries: tuple[tuple[int, int, int], ...]
    keys: tuple[tuple[int, int, int], ...]
    visible: np.ndarray

    def visible_keys(self, q: int) -> list[tuple[int, int, int]]:
        return [self.keys[k] for k in np.flatnonzero(self.visible[q])]


class SubscalePlan:
    """Total generation order over the positions of a ``(T, h, w)`` grid."""

    def __init__(self, extents: tuple[int, int, int], factor: SubscaleFactor, n_c: int = 1):
        T, h, w = extents
        st, sh, sw = factor.as_tuple()
        for axis, size, s in (("t", T, st), ("h", h, sh), ("w", w, sw)):
            if size < 1:
                raise ValueError(f"extent along {axis} must be positive, got {size}")
            if size % s:
                raise ValueError(f"subscale factor {s} does not divide extent {size} along axis {axis}")
        self.extents = (T, h, w)
        self.factor = factor
        self.n_c = n_c
        self.slice_shape = (T // st, h // sh, w // sw)
        self.slices: list[tuple[int, int, int]] = list(itertools.product(range(st), range(sh), range(sw)))

        rank = np.empty((T, h, w), dtype=np.int64)
        slice_of = np.empty((T, h, w), dtype=np.int64)
        within = np.empty((T, h, w), dtype=np.int64)
        order = []
        for sid, (a, b, c) in enumerate(self.slices):
            for r, (i, j, k) in enumerate(itertools.product(*(range(n) for n in self.slice_shape))):
                t, y, x = a + i * st, b + j * sh, c + k * sw
                rank[t, y, x] = len(order)
                slice_of[t, y, x] = sid
                within[t, y, x] = r
                order.append((t, y, x))
        self.order: tuple[tuple[int, int, int], ...] = tuple(order)
        self.rank = rank
        self.slice_of = slice_of
        self.within_rank = within
        for arr in (rank, slice_of, within):
            arr.flags.writeable = False

    def __repr__(self) -> str:
        return f"SubscalePlan(extents={self.extents}, factor={self.factor.as_tuple()}, n_c={self.n_c})"

    @property
    def num_positions(self) -> int:
        return len(self.order)

    @property
    def slice_len(self) -> int:
        T, h, w = self.slice_shape
        return T * h * w

    def slice_positions(self, slice_id: int) -> tuple[tuple[int, int, int], ...]:
        n = self.slice_len
        return self.order[slice_id * n : (slice_id + 1) * n]

    def slice_index(self, slice_key: tuple[int, int, int]) -> int:
        return self.slices.index(tuple(slice_key))

    @cached_property
    def flat_order(self) -> np.ndarray:
        """Raster-flattened grid offsets of the positions, in generation order."""
        T, h, w = self.extents
        o = np.array(self.order, dtype=np.int64)
        out = (o[:, 0] * h + o[:, 1]) * w + o[:, 2]
        out.flags.writeable = False
        return out

    def levels(self, prime_frames: int = 0) -> np.ndarray:
        """Per-position level: slice index, or -1 inside priming frames."""
        lv = self.slice_of.copy()
        lv[:prime_frames] = -1
        return lv

    def events(self, prime_frames: int = 0) -> list[tuple[tuple[int, int, int], int]]:
        """Ordered ``(position, channel)`` sampling events, priming skipped."""
        return [(p, k) for p in self.order if p[0] >= prime_frames for k in range(self.n_c)]

    def to_text(self) -> str:
        T, h, w = self.extents
        lines = [f"# extents {T} {h} {w} n_c {self.n_c} factor {' '.join(map(str, self.factor.as_tuple()))}"]
        lines += [f"{t} {y} {x}" for t, y, x in self.order]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SubscalePlan":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if head[:2] != ["#", "extents"]:
            raise ValueError("plan text must start with '# extents'")
        T, h, w = map(int, head[2:5])
        n_c = int(head[6])
        factor = SubscaleFactor(*map(int, head[8:11]))
        plan = cls((T, h, w), factor, n_c)
        stored = tuple(tuple(map(int, ln.split())) for ln in lines[1:])
        if stored != plan.order:
            raise ValueError("stored order does not match the order induced by the factor")
        return plan


def build_plan(extents, factor: SubscaleFactor | tuple[int, int, int], n_c: int = 1) -> SubscalePlan:
    """Builds the plan for ``(T, h, w)`` or ``(T, h, w, n_c)`` extents."""
    extents = tuple(int(v) for v in extents)
    if len(extents) == 4:
        n_c = extents[3]
        extents = extents[:3]
    if not isinstance(factor, SubscaleFactor):
        factor = SubscaleFactor(*factor)
    return SubscalePlan(extents, factor, n_c)


def visible_context(plan: SubscalePlan, slice_id: int, prime_frames: int = 0) -> CausalMaskSpec:
    """Encoder visibility for queries in ``slice_id``: earlier slices and priming frames."""
    if not 0 <= slice_id < len(plan.slices):
        raise IndexError(f"slice id {slice_id} outside [0, {len(plan.slices)})")
    queries = plan.slice_positions(slice_id)
    keys = plan.order
    lv = plan.levels(prime_frames)
    key_vis = np.array([lv[p] < slice_id for p in keys])
    visible = np.broadcast_to(key_vis, (len(queries), len(keys))).copy()
    visible.flags.writeable = False
    return CausalMaskSpec(queries, keys, visible)


def decoder_mask(plan: SubscalePlan, slice_id: int) -> CausalMaskSpec:
    """Within-slice visibility: rank ``r`` sees ranks ``< r``."""
    if not 0 <= slice_id < len(plan.slices):
        raise IndexError(f"slice id {slice_id} outside [0, {len(plan.slices)})")
    pos = plan.slice_positions(slice_id)
    n = len(pos)
    visible = np.tril(np.ones((n, n), dtype=bool), k=-1)
    visible.flags.writeable = False
    return CausalMaskSpec(pos, pos, visible)


def encoder_self_mask(plan: SubscalePlan, prime_frames: int = 0) -> np.ndarray:
    """``(L, L)`` mask over raster-flattened positions: key level <= query level."""
    lv = plan.levels(prime_frames).reshape(-1)
    return lv[None, :] <= lv[:, None]


def cross_mask(plan: SubscalePlan, prime_frames: int = 0) -> np.ndarray:
    """``(S, L)`` mask: slice ``n`` may read encoder positions of level ``< n``."""
    lv = plan.levels(prime_frames).reshape(-1)
    return lv[None, :] < np.arange(len(plan.slices))[:, None]
