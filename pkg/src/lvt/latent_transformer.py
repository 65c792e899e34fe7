"""Encoder-decoder transformer over latent code grids.

The encoder reads the whole ``(T, h, w)`` grid under a block-causal mask on
slice levels, so one pass yields a context that is valid for every slice.
The decoder runs each slice as a separate sequence. Its input at rank ``r``
carries the content of rank ``r - 1``, self-attention reaches ranks ``< r``,
and cross-attention reaches encoder positions of strictly lower level. Codebook
channels of one position are predicted in turn by a small head that adds
the embeddings of the channels already known.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from lvt import numerics as nx
from lvt import subscale
from lvt.numerics import ParamStore

VARIANTS = ("query_key_relative", "key_relative", "relative_only")


@dataclass(frozen=True)
class TransformerConfig:
    K: int = 64
    n_c: int = 2
    extents: tuple[int, int, int] = (16, 8, 8)
    factor: tuple[int, int, int] = (16, 1, 1)
    d_model: int = 128
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 4
    ff_width: int = 256
    attention_variant: str = "query_key_relative"
    max_relative: tuple[int, int, int] = (8, 8, 8)
    prime_frames: int = 1

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.attention_variant not in VARIANTS:
            raise ValueError(f"attention_variant must be one of {VARIANTS}, got {self.attention_variant!r}")
        if not 0 <= self.prime_frames < self.extents[0]:
            raise ValueError(f"prime_frames={self.prime_frames} outside [0, T={self.extents[0]})")
        subscale.build_plan(self.extents, self.factor, self.n_c)

    @property
    def vocab(self) -> int:
        """Embedding rows: K codes plus the padding token ``K``."""
        return self.K + 1

    @property
    def pad(self) -> int:
        return self.K

    @property
    def head_width(self) -> int:
        return self.d_model // self.heads

    def plan(self) -> subscale.SubscalePlan:
        return _plan(self.extents, self.factor, self.n_c)


@lru_cache(maxsize=32)
def _plan(extents, factor, n_c):
    return subscale.build_plan(extents, factor, n_c)


@dataclass
class Geometry:
    """Masks, relative offsets and position ids for one plan and priming count.

    Relative offsets are stored per axis. Queries and keys always form
    raster-ordered sub-grids, so the full ``(Q, K)`` bias is a broadcast sum
    of three small per-axis tables.
    """

    plan: subscale.SubscalePlan
    prime_frames: int
    coords: torch.Tensor  # (L, 3) raster order
    slice_id: torch.Tensor  # (L,)
    primed: torch.Tensor  # (L,) bool
    slice_pos: torch.Tensor  # (S, n) raster offsets in generation order
    enc_mask: torch.Tensor  # (1, 1, L, L)
    dec_mask: torch.Tensor  # (1, 1, n, n)
    cross_mask: torch.Tensor  # (S, 1, n, L)
    enc_rel: tuple  # per axis (1, A, A)
    dec_rel: tuple  # per axis (1, As, As)
    cross_rel: tuple  # per axis (S, As, A)
    _additive: dict = field(default_factory=dict, repr=False)

    def additive(self, name: str, mask: torch.Tensor, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor | None]:
        """``(0 / -inf additive mask, row keep-mask or None)`` for a boolean mask.

        Rows without any visible key get a zero mask so the softmax stays
        finite; the keep-mask zeroes them afterwards.
        """
        key = (name, dtype, tuple(mask.shape))
        if key not in self._additive:
            self._additive[key] = additive_mask(mask, dtype)
        return self._additive[key]


def additive_mask(mask: torch.Tensor, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor | None]:
    empty = ~mask.any(-1, keepdim=True)
    add = torch.zeros(mask.shape, dtype=dtype).masked_fill(~mask & ~empty, float("-inf"))
    keep = (~empty).to(dtype) if bool(empty.any()) else None
    return add, keep


def _axis_rel(q: np.ndarray, k: np.ndarray, R: int) -> torch.Tensor:
    """Clipped offsets ``k - q`` as table indices, broadcasting ``q[..., :, None]``."""
    return torch.from_numpy(np.clip(k[..., None, :] - q[..., :, None], -R, R) + R)


@lru_cache(maxsize=16)
def geometry(extents, factor, n_c, max_rel, prime_frames) -> Geometry:
    plan = _plan(tuple(extents), tuple(factor), n_c)
    T, h, w = plan.extents
    coords = np.stack(np.meshgrid(np.arange(T), np.arange(h), np.arange(w), indexing="ij"), -1).reshape(-1, 3)
    slice_pos = plan.flat_order.reshape(len(plan.slices), plan.slice_len)
    n = plan.slice_len
    slices = np.array(plan.slices)  # (S, 3)
    enc_rel, dec_rel, cross_rel = [], [], []
    for a, (size, s, R) in enumerate(zip(plan.extents, plan.factor.as_tuple(), max_rel)):
        full = np.arange(size)
        sub = np.arange(size // s) * s
        enc_rel.append(_axis_rel(full, full, R)[None])
        dec_rel.append(_axis_rel(sub, sub, R)[None])
        cross_rel.append(_axis_rel(slices[:, a, None] + sub[None], full[None], R))
    cross = subscale.cross_mask(plan, prime_frames)  # (S, L)
    return Geometry(
        plan=plan,
        prime_frames=prime_frames,
        coords=torch.from_numpy(coords),
        slice_id=torch.from_numpy(plan.slice_of.reshape(-1).copy()),
        primed=torch.from_numpy(coords[:, 0] < prime_frames),
        slice_pos=torch.from_numpy(slice_pos.copy()),
        enc_mask=torch.from_numpy(subscale.encoder_self_mask(plan, prime_frames))[None, None],
        dec_mask=torch.from_numpy(np.tril(np.ones((n, n), dtype=bool), k=-1))[None, None],
        cross_mask=torch.from_numpy(np.repeat(cross[:, None, :], n, axis=1))[:, None],
        enc_rel=tuple(enc_rel),
        dec_rel=tuple(dec_rel),
        cross_rel=tuple(cross_rel),
    )


def config_geometry(config: TransformerConfig, prime_frames: int | None = None) -> Geometry:
    pf = config.prime_frames if prime_frames is None else prime_frames
    return geometry(tuple(config.extents), tuple(config.factor), config.n_c, tuple(config.max_relative), pf)


# ---------------------------------------------------------------------------
# Parameters


def _attention_params(store: ParamStore, prefix: str, variant: str, config: TransformerConfig, gen, dtype):
    d, M = config.d_model, config.heads
    if variant == "query_key_relative":
        store.add(f"{prefix}.wq", nx.he_uniform((d, d), d, gen, dtype))
    if variant in ("query_key_relative", "key_relative"):
        store.add(f"{prefix}.wk", nx.he_uniform((d, d), d, gen, dtype))
    if variant == "key_relative":
        store.add(f"{prefix}.u", nx.normal_init((M, config.head_width), 0.02, gen, dtype))
    store.add(f"{prefix}.wv", nx.he_uniform((d, d), d, gen, dtype))
    store.add(f"{prefix}.wo", nx.he_uniform((d, d), d, gen, dtype))
    for axis, R in zip("thw", config.max_relative):
        store.add(f"{prefix}.rel_{axis}", nx.normal_init((M, 2 * R + 1), 0.02, gen, dtype))


def _norm_params(store: ParamStore, prefix: str, d: int, dtype):
    store.add(f"{prefix}.g", torch.ones(d, dtype=dtype))
    store.add(f"{prefix}.b", torch.zeros(d, dtype=dtype))


def _ff_params(store: ParamStore, prefix: str, config: TransformerConfig, gen, dtype):
    d, f = config.d_model, config.ff_width
    store.add(f"{prefix}.w1", nx.he_uniform((d, f), d, gen, dtype))
    store.add(f"{prefix}.b1", torch.zeros(f, dtype=dtype))
    store.add(f"{prefix}.w2", nx.he_uniform((f, d), f, gen, dtype))
    store.add(f"{prefix}.b2", torch.zeros(d, dtype=dtype))


def init_params(config: TransformerConfig, seed: int = 0, dtype=torch.float32) -> ParamStore:
    gen = nx.make_generator(seed)
    store = ParamStore()
    d = config.d_model
    T, h, w = config.extents
    for k in range(config.n_c):
        store.add(f"emb.tok{k}", nx.normal_init((config.vocab, d), 0.02, gen, dtype))
    store.add("emb.t", nx.normal_init((T, d), 0.02, gen, dtype))
    store.add("emb.y", nx.normal_init((h, d), 0.02, gen, dtype))
    store.add("emb.x", nx.normal_init((w, d), 0.02, gen, dtype))
    store.add("emb.slice", nx.normal_init((config.plan().factor.num_slices, d), 0.02, gen, dtype))
    store.add("dec.start", nx.normal_init((d,), 0.02, gen, dtype))

    for l in range(config.encoder_layers):
        _norm_params(store, f"enc{l}.ln1", d, dtype)
        _attention_params(store, f"enc{l}.attn", config.attention_variant, config, gen, dtype)
        _norm_params(store, f"enc{l}.ln2", d, dtype)
        _ff_params(store, f"enc{l}.ff", config, gen, dtype)
    _norm_params(store, "enc.ln", d, dtype)

    for l in range(config.decoder_layers):
        _norm_params(store, f"dec{l}.ln1", d, dtype)
        _attention_params(store, f"dec{l}.self", config.attention_variant, config, gen, dtype)
        _norm_params(store, f"dec{l}.ln2", d, dtype)
        _attention_params(store, f"dec{l}.cross", "query_key_relative", config, gen, dtype)
        _norm_params(store, f"dec{l}.ln3", d, dtype)
        _ff_params(store, f"dec{l}.ff", config, gen, dtype)
    _norm_params(store, "dec.ln", d, dtype)

    for k in range(config.n_c):
        store.add(f"head.query{k}", nx.normal_init((d,), 0.02, gen, dtype))
    for k in range(config.n_c - 1):
        store.add(f"head.chan{k}", nx.normal_init((config.K, d), 0.02, gen, dtype))
    _norm_params(store, "head.ln", d, dtype)
    store.add("head.w1", nx.he_uniform((d, d), d, gen, dtype))
    store.add("head.b1", torch.zeros(d, dtype=dtype))
    # zero output layer: the untrained model predicts exactly uniform codes
    store.add("head.w2", torch.zeros(d, config.K, dtype=dtype))
    store.add("head.b2", torch.zeros(config.K, dtype=dtype))
    return store


def parameter_count(config: TransformerConfig) -> int:
    return init_params(config, 0).count()


# ---------------------------------------------------------------------------
# Attention


def relative_bias(params, prefix: str, rel: tuple) -> torch.Tensor:
    """``b_kq`` as the sum of per-axis lookups.

    ``rel`` holds one ``(G, Qa, Ka)`` index tensor per axis; the result is
    ``(G, M, Qt*Qh*Qw, Kt*Kh*Kw)`` with raster-ordered queries and keys.
    """
    bt, bh, bw = (params[f"{prefix}.rel_{axis}"][:, idx] for axis, idx in zip("thw", rel))  # (M, G, Qa, Ka)
    M, G = bt.shape[:2]
    Qt, Kt = bt.shape[2:]
    Qh, Kh = bh.shape[2:]
    Qw, Kw = bw.shape[2:]
    out = (bt[:, :, :, None, None, :, None, None]
           + bh[:, :, None, :, None, None, :, None]
           + bw[:, :, None, None, :, None, None, :])
    return out.reshape(M, G, Qt * Qh * Qw, Kt * Kh * Kw).transpose(0, 1)


def _heads(x: torch.Tensor, M: int) -> torch.Tensor:
    """``(..., N, d)`` -> ``(..., M, N, d/M)``."""
    return x.reshape(*x.shape[:-1], M, x.shape[-1] // M).transpose(-3, -2)


def attention(
    x_q: torch.Tensor,
    x_k: torch.Tensor,
    mask: torch.Tensor,
    variant: str,
    params,
    prefix: str,
    rel_index: torch.Tensor,
    heads: int,
    return_weights: bool = False,
    geo: "Geometry | None" = None,
    mask_name: str = "",
):
    """Multi-head attention with relative-distance biases.

    ``x_q`` is ``(B, G, Q, d)`` and ``x_k`` is ``(B, Gk, Kk, d)`` with ``Gk``
    either ``G`` or 1 (keys shared by all groups). ``mask`` broadcasts to
    ``(G, M, Q, Kk)``; a query with no visible key yields zeros. ``geo`` and
    ``mask_name`` let repeated calls reuse the additive form of the mask.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}")
    M = heads
    v = _heads(nx.matmul(x_k, params[f"{prefix}.wv"]), M)  # (B, Gk, M, Kk, dh)
    logits = relative_bias(params, prefix, rel_index)  # (G, M, Q, Kk)
    if variant == "query_key_relative":
        q = _heads(nx.matmul(x_q, params[f"{prefix}.wq"]), M)
        k = _heads(nx.matmul(x_k, params[f"{prefix}.wk"]), M)
        logits = (q / math.sqrt(q.shape[-1])) @ k.transpose(-1, -2) + logits
    elif variant == "key_relative":
        k = _heads(nx.matmul(x_k, params[f"{prefix}.wk"]), M)
        content = (k * params[f"{prefix}.u"][:, None, :]).sum(-1) / math.sqrt(k.shape[-1])
        logits = content[..., None, :] + logits
    else:
        logits = logits.expand(x_q.shape[0], *logits.shape)
    if geo is None:
        add, keep = additive_mask(mask, logits.dtype)
    else:
        add, keep = geo.additive(mask_name, mask, logits.dtype)
    weights = torch.softmax(logits + add, dim=-1)
    if keep is not None:
        weights = weights * keep
    y = weights @ v  # (B, G, M, Q, dh)
    y = y.transpose(-3, -2).reshape(*y.shape[:-3], y.shape[-2], -1)
    y = nx.matmul(y, params[f"{prefix}.wo"])
    if not bool(torch.isfinite(y).all()):
        raise nx.NumericError(f"{prefix}: non-finite attention output")
    return (y, weights) if return_weights else y


def _ln(params, prefix, x):
    return nx.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _ff(params, prefix, x):
    h = nx.relu(nx.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return nx.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


# ---------------------------------------------------------------------------
# Network


def _content(params, config: TransformerConfig, codes: torch.Tensor) -> torch.Tensor:
    """Sum of per-channel embeddings of ``(..., n_c)`` codes (padding allowed)."""
    out = None
    for k in range(config.n_c):
        e = nx.embedding_lookup(params[f"emb.tok{k}"], codes[..., k])
        out = e if out is None else out + e
    return out


def _position(params, geo: Geometry) -> torch.Tensor:
    c = geo.coords
    return params["emb.t"][c[:, 0]] + params["emb.y"][c[:, 1]] + params["emb.x"][c[:, 2]] + params["emb.slice"][geo.slice_id]


def _check_grid(grid: torch.Tensor, config: TransformerConfig) -> torch.Tensor:
    if grid.dim() == 4:
        grid = grid[None]
    if grid.dim() != 5 or tuple(grid.shape[1:]) != (*config.extents, config.n_c):
        raise ValueError(
            f"latent grid must be (B, {', '.join(map(str, config.extents))}, {config.n_c}), "
            f"got {tuple(grid.shape)}"
        )
    return grid.long()


def encoder_states(params, config: TransformerConfig, grid: torch.Tensor, geo: Geometry) -> torch.Tensor:
    """``(B, L, d)`` encoder output; position ``p`` depends on levels ``<= level(p)`` only."""
    B = grid.shape[0]
    x = _content(params, config, grid.reshape(B, -1, config.n_c)) + _position(params, geo)
    x = x[:, None]  # single group
    for l in range(config.encoder_layers):
        h = _ln(params, f"enc{l}.ln1", x)
        x = x + attention(h, h, geo.enc_mask, config.attention_variant, params, f"enc{l}.attn",
                          geo.enc_rel, config.heads, geo=geo, mask_name="enc")
        x = x + _ff(params, f"enc{l}.ff", _ln(params, f"enc{l}.ln2", x))
    return _ln(params, "enc.ln", x)[:, 0]


def encode_context(params, config: TransformerConfig, grid: torch.Tensor, slice_id: int,
                   prime_frames: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Context for generating ``slice_id``.

    Returns ``(states, visible)``: ``(B, L, d)`` states zeroed outside the
    visible set, and the ``(L,)`` visibility mask.
    """
    grid = _check_grid(grid, config)
    geo = config_geometry(config, prime_frames)
    if not 0 <= slice_id < len(geo.plan.slices):
        raise IndexError(f"slice id {slice_id} outside [0, {len(geo.plan.slices)})")
    visible = geo.cross_mask[slice_id, 0, 0]
    states = encoder_states(params, config, grid, geo)
    return states * visible[None, :, None].to(states.dtype), visible


def decoder_states(params, config: TransformerConfig, grid: torch.Tensor, context: torch.Tensor,
                   geo: Geometry, slices: torch.Tensor | None = None) -> torch.Tensor:
    """``(B, G, n, d)`` decoder output for the selected slices (all by default)."""
    B = grid.shape[0]
    d = config.d_model
    if slices is None:
        slices = torch.arange(len(geo.plan.slices))
    flat = grid.reshape(B, -1, config.n_c)
    pos_ids = geo.slice_pos[slices]  # (G, n)
    codes = flat[:, pos_ids]  # (B, G, n, n_c)
    prev = _content(params, config, codes[:, :, :-1])
    start = params["dec.start"].expand(B, len(slices), 1, d)
    x = torch.cat([start, prev], dim=2) + _position(params, geo)[pos_ids]
    cmask = geo.cross_mask[slices]
    crel = tuple(r[slices] for r in geo.cross_rel)
    cname = "cross" if len(slices) == len(geo.plan.slices) else f"cross{slices.tolist()}"
    mem = context[:, None]  # (B, 1, L, d) shared by every slice
    for l in range(config.decoder_layers):
        h = _ln(params, f"dec{l}.ln1", x)
        x = x + attention(h, h, geo.dec_mask, config.attention_variant, params, f"dec{l}.self",
                          geo.dec_rel, config.heads, geo=geo, mask_name="dec")
        x = x + attention(_ln(params, f"dec{l}.ln2", x), mem, cmask, "query_key_relative", params,
                          f"dec{l}.cross", crel, config.heads, geo=geo, mask_name=cname)
        x = x + _ff(params, f"dec{l}.ff", _ln(params, f"dec{l}.ln3", x))
    return _ln(params, "dec.ln", x)


def head_logits(params, config: TransformerConfig, states: torch.Tensor, prefix_codes: torch.Tensor, k: int) -> torch.Tensor:
    """Logits over ``K`` for channel ``k`` given the channels ``< k`` of the same position."""
    x = states + params[f"head.query{k}"]
    for j in range(k):
        x = x + nx.embedding_lookup(params[f"head.chan{j}"], prefix_codes[..., j])
    h = nx.relu(nx.matmul(_ln(params, "head.ln", x), params["head.w1"]) + params["head.b1"])
    return nx.matmul(h, params["head.w2"]) + params["head.b2"]


def forward(params, config: TransformerConfig, grid: torch.Tensor, prime_frames: int | None = None) -> torch.Tensor:
    """Teacher-forced logits ``(B, L, n_c, K)`` in generation order."""
    grid = _check_grid(grid, config)
    if int(grid.max()) >= config.K or int(grid.min()) < 0:
        raise ValueError(f"latent codes must lie in [0, {config.K})")
    geo = config_geometry(config, prime_frames)
    context = encoder_states(params, config, grid, geo)
    states = decoder_states(params, config, grid, context, geo)  # (B, S, n, d)
    B = grid.shape[0]
    codes = grid.reshape(B, -1, config.n_c)[:, geo.slice_pos]  # (B, S, n, n_c)
    logits = torch.stack([head_logits(params, config, states, codes, k) for k in range(config.n_c)], dim=3)
    return logits.reshape(B, -1, config.n_c, config.K)


def decode_logits(params, config: TransformerConfig, grid: torch.Tensor, context: torch.Tensor, slice_id: int,
                  rank: int, channel: int, prime_frames: int | None = None) -> torch.Tensor:
    """``(B, K)`` logits for ``channel`` of the rank-``rank`` position of ``slice_id``.

    Only slice ranks ``< rank`` and channels ``< channel`` of the current
    position are read from ``grid``; anything else may hold any value.
    """
    grid = _check_grid(grid, config)
    geo = config_geometry(config, prime_frames)
    n = geo.plan.slice_len
    if not 0 <= rank < n:
        raise ValueError(f"rank {rank} outside slice of length {n}")
    if not 0 <= channel < config.n_c:
        raise ValueError(f"channel {channel} outside [0, {config.n_c})")
    states = decoder_states(params, config, grid, context, geo, torch.tensor([slice_id]))[:, 0, rank]
    pos = geo.slice_pos[slice_id, rank]
    prefix = grid.reshape(grid.shape[0], -1, config.n_c)[:, pos]
    return head_logits(params, config, states, prefix, channel)


def nll_loss(params, config: TransformerConfig, grid: torch.Tensor, prime_frames: int | None = None) -> torch.Tensor:
    """Mean negative log-likelihood in nats over non-priming positions and channels."""
    grid = _check_grid(grid, config)
    geo = config_geometry(config, prime_frames)
    logits = forward(params, config, grid, prime_frames)
    B = grid.shape[0]
    targets = grid.reshape(B, -1, config.n_c)[:, geo.slice_pos.reshape(-1)]
    nll = nx.cross_entropy(logits, targets)  # (B, L, n_c)
    keep = ~geo.primed[geo.slice_pos.reshape(-1)]
    if not bool(keep.any()):
        raise ValueError("every position is priming; nothing to predict")
    return nll[:, keep].mean()
