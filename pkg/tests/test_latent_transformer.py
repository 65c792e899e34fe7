import math

import numpy as np
import pytest
import torch

from conftest import randomize, tiny_config
from lvt import latent_transformer as lt
from lvt import metrics
from lvt import numerics as nx
from oracles import attention_weights, fd_gradient, relative_error

D64 = torch.float64


def attn_setup(variant, seed=0, d=6, heads=2, R=2):
    config = tiny_config(d_model=d, heads=heads, max_relative=(R, R, R))
    store = nx.ParamStore()
    lt._attention_params(store, "a", variant, config, nx.make_generator(seed), D64)
    return randomize(store, seed), config


def rel_grid(gen, Qs, Ks, R):
    """Random per-axis offset indices for queries of shape Qs against keys of shape Ks."""
    return tuple(torch.randint(0, 2 * R + 1, (1, q, k), generator=gen) for q, k in zip(Qs, Ks))


def oracle_logits(params, variant, x_q, x_k, rel, Qs, Ks, heads):
    """Per-head logits written out one (head, query, key) triple at a time."""
    p = {k: v.detach().numpy() for k, v in params.params.items()}
    xq, xk = x_q.numpy(), x_k.numpy()
    d = xq.shape[-1]
    dh = d // heads
    Q, Kn = xq.shape[0], xk.shape[0]
    out = np.zeros((heads, Q, Kn))
    for m in range(heads):
        cols = slice(m * dh, (m + 1) * dh)
        for qi in range(Q):
            qt, qh, qw = np.unravel_index(qi, Qs)
            for ki in range(Kn):
                kt, kh, kw = np.unravel_index(ki, Ks)
                val = (p["a.rel_t"][m, rel[0][0, qt, kt]] + p["a.rel_h"][m, rel[1][0, qh, kh]]
                       + p["a.rel_w"][m, rel[2][0, qw, kw]])
                kvec = xk[ki] @ p["a.wk"][:, cols] if variant != "relative_only" else None
                if variant == "query_key_relative":
                    val += (xq[qi] @ p["a.wq"][:, cols]) @ kvec / math.sqrt(dh)
                elif variant == "key_relative":
                    val += p["a.u"][m] @ kvec / math.sqrt(dh)
                out[m, qi, ki] = val
    return out


# ---------------------------------------------------------------------------
# attention


@pytest.mark.parametrize("variant", lt.VARIANTS)
def test_attention_weights_match_direct_softmax(variant):
    params, config = attn_setup(variant, seed=1)
    gen = nx.make_generator(2)
    Qs, Ks = (1, 1, 2), (3, 1, 1)
    x_q = torch.randn(2, 6, generator=gen, dtype=D64)
    x_k = torch.randn(3, 6, generator=gen, dtype=D64)
    rel = rel_grid(gen, Qs, Ks, 2)
    mask = torch.tensor([[True, True, True], [True, False, True]])
    _, w = lt.attention(x_q[None, None], x_k[None, None], mask, variant, params.params, "a", rel, 2,
                        return_weights=True)
    logits = oracle_logits(params, variant, x_q, x_k, rel, Qs, Ks, 2)
    expected = attention_weights(logits, np.broadcast_to(mask.numpy(), logits.shape))
    np.testing.assert_allclose(w[0, 0].detach().numpy(), expected, rtol=0, atol=1e-10)


@pytest.mark.parametrize("variant", lt.VARIANTS)
def test_single_visible_key_passes_its_value(variant):
    params, _ = attn_setup(variant, seed=3)
    gen = nx.make_generator(4)
    x_q = torch.randn(1, 1, 1, 6, generator=gen, dtype=D64)
    x_k = torch.randn(1, 1, 3, 6, generator=gen, dtype=D64)
    rel = rel_grid(gen, (1, 1, 1), (3, 1, 1), 2)
    mask = torch.tensor([[False, True, False]])
    y, w = lt.attention(x_q, x_k, mask, variant, params.params, "a", rel, 2, return_weights=True)
    assert torch.equal(w[0, 0, :, 0], torch.tensor([[0.0, 1.0, 0.0]] * 2, dtype=D64))
    expected = x_k[0, 0, 1] @ params["a.wv"] @ params["a.wo"]
    assert torch.allclose(y[0, 0, 0], expected, atol=1e-12)


def test_relative_only_zero_tables_uniform():
    params, _ = attn_setup("relative_only")
    with torch.no_grad():
        for axis in "thw":
            params[f"a.rel_{axis}"].zero_()
    gen = nx.make_generator(0)
    x = torch.randn(1, 1, 4, 6, generator=gen, dtype=D64)
    rel = rel_grid(gen, (4, 1, 1), (4, 1, 1), 2)
    mask = torch.tril(torch.ones(4, 4, dtype=torch.bool))
    _, w = lt.attention(x, x, mask, "relative_only", params.params, "a", rel, 2, return_weights=True)
    for q in range(4):
        assert torch.allclose(w[0, 0, :, q, : q + 1], torch.full((2, q + 1), 1.0 / (q + 1), dtype=D64), atol=1e-15)


@pytest.mark.parametrize("variant", lt.VARIANTS)
@pytest.mark.parametrize("seed", range(5))
def test_weights_sum_to_one_and_empty_rows_are_zero(variant, seed):
    params, _ = attn_setup(variant, seed=seed)
    gen = nx.make_generator(seed)
    x = torch.randn(2, 1, 8, 6, generator=gen, dtype=D64)
    rel = rel_grid(gen, (2, 2, 2), (2, 2, 2), 2)
    mask = torch.rand(8, 8, generator=gen) < 0.5
    mask[3] = False
    y, w = lt.attention(x, x, mask, variant, params.params, "a", rel, 2, return_weights=True)
    sums = w.sum(-1)
    rows = mask.any(-1)
    assert torch.allclose(sums[..., rows], torch.ones_like(sums[..., rows]), atol=1e-9)
    assert bool((w[..., 3, :] == 0).all()) and bool((y[:, :, 3] == 0).all())


def test_relative_offsets_are_clipped():
    idx = lt._axis_rel(np.array([0]), np.array([0, 1, 2, 9]), 2)
    assert idx.tolist() == [[2, 3, 4, 4]]


@pytest.mark.parametrize("d,heads,layers", [(8, 2, 1), (32, 4, 2), (128, 4, 3)])
def test_parameter_counts_strictly_decrease(d, heads, layers):
    counts = [lt.parameter_count(tiny_config(d_model=d, heads=heads, encoder_layers=layers,
                                             decoder_layers=layers, attention_variant=v)) for v in lt.VARIANTS]
    assert counts[0] > counts[1] > counts[2]


def test_config_rejects_bad_heads_and_variant():
    with pytest.raises(ValueError, match="divisible"):
        tiny_config(d_model=10, heads=4)
    with pytest.raises(ValueError, match="attention_variant"):
        tiny_config(attention_variant="bogus")


# ---------------------------------------------------------------------------
# context encoder


@pytest.fixture
def random_model(tiny):
    return tiny, randomize(lt.init_params(tiny, seed=0, dtype=D64), seed=1)


def random_grid(config, seed, high=None):
    gen = nx.make_generator(seed)
    return torch.randint(0, config.K if high is None else high, (1, *config.extents, config.n_c), generator=gen)


def test_first_slice_context_ignores_every_latent(random_model):
    config, params = random_model
    a, _ = lt.encode_context(params.params, config, random_grid(config, 0), 0)
    b, _ = lt.encode_context(params.params, config, random_grid(config, 1), 0)
    assert torch.equal(a, b) and not bool(a.any())


@pytest.mark.parametrize("sid", [1, 4, 7])
def test_context_ignores_padded_and_reacts_to_visible(random_model, sid):
    config, params = random_model
    grid = random_grid(config, 2)
    base, visible = lt.encode_context(params.params, config, grid, sid)
    flat = grid.view(1, -1, config.n_c)
    hidden = torch.nonzero(~visible).reshape(-1)
    shown = torch.nonzero(visible).reshape(-1)
    for pos in hidden[:6].tolist():
        g = grid.clone()
        g.view(1, -1, config.n_c)[0, pos, 0] = (flat[0, pos, 0] + 1) % config.K
        assert torch.equal(lt.encode_context(params.params, config, g, sid)[0], base)
    g = grid.clone()
    pos = int(shown[0])
    g.view(1, -1, config.n_c)[0, pos, 1] = (flat[0, pos, 1] + 1) % config.K
    assert not torch.equal(lt.encode_context(params.params, config, g, sid)[0], base)


# ---------------------------------------------------------------------------
# decoder and causality


@pytest.mark.parametrize("variant", lt.VARIANTS)
@pytest.mark.parametrize("seed", range(2))
def test_future_values_leave_logits_unchanged(variant, seed):
    config = tiny_config(attention_variant=variant)
    params = randomize(lt.init_params(config, seed=seed, dtype=D64), seed=seed + 100)
    plan = config.plan()
    gen = nx.make_generator(seed)
    grid = random_grid(config, seed)
    flat_order = plan.flat_order
    for sid in (0, 3, 7):
        for r in (0, 5):
            for k in range(config.n_c):
                step = (sid * plan.slice_len + r) * config.n_c + k
                ctx, _ = lt.encode_context(params.params, config, grid, sid)
                base = lt.decode_logits(params.params, config, grid, ctx, sid, r, k)
                other = grid.clone().view(1, -1, config.n_c)
                for s in range(step, len(flat_order) * config.n_c):
                    pos, ch = divmod(s, config.n_c)
                    other[0, flat_order[pos], ch] = int(torch.randint(0, config.K + 1, (), generator=gen))
                other = other.view_as(grid)
                ctx2, _ = lt.encode_context(params.params, config, other, sid)
                assert torch.equal(lt.decode_logits(params.params, config, other, ctx2, sid, r, k), base)


def test_logit_length_is_k():
    config = lt.TransformerConfig(K=64, n_c=2, extents=(2, 2, 2), factor=(2, 1, 1), d_model=8, heads=2,
                                  encoder_layers=1, decoder_layers=1, ff_width=8, prime_frames=0)
    params = lt.init_params(config)
    grid = torch.full((1, 2, 2, 2, 2), config.pad)
    ctx, _ = lt.encode_context(params.params, config, grid, 0)
    assert lt.decode_logits(params.params, config, grid, ctx, 0, 0, 0).shape == (1, 64)


@pytest.mark.parametrize("factor", [(2, 2, 2), (1, 1, 1), (4, 1, 1)])
def test_chain_rule_walker_matches_teacher_forcing(factor):
    config = tiny_config(factor=factor)
    params = randomize(lt.init_params(config, seed=5, dtype=D64), seed=6)
    plan = config.plan()
    target = random_grid(config, 7)
    logits = lt.forward(params.params, config, target)
    tf = torch.log_softmax(logits, -1).gather(-1, target.view(1, -1, 2)[:, torch.from_numpy(plan.flat_order.copy()), :, None]).sum()

    walk = torch.full_like(target, config.pad).view(1, -1, config.n_c)
    total = 0.0
    for sid in range(len(plan.slices)):
        for r in range(plan.slice_len):
            pos = plan.flat_order[sid * plan.slice_len + r]
            for k in range(config.n_c):
                g = walk.view_as(target)
                ctx, _ = lt.encode_context(params.params, config, g, sid)
                step = lt.decode_logits(params.params, config, g, ctx, sid, r, k)
                code = int(target.view(1, -1, 2)[0, pos, k])
                total += float(torch.log_softmax(step[0].detach(), -1)[code])
                walk[0, pos, k] = code
    assert abs(total - float(tf.detach())) < 1e-8


def test_forward_rejects_out_of_range_codes(tiny):
    params = lt.init_params(tiny)
    grid = torch.zeros(1, *tiny.extents, tiny.n_c, dtype=torch.long)
    grid[0, 0, 0, 0, 0] = tiny.K
    with pytest.raises(ValueError, match=r"\[0, 5\)"):
        lt.forward(params.params, tiny, grid)
    with pytest.raises(ValueError, match="latent grid"):
        lt.forward(params.params, tiny, grid[:, :2])


# ---------------------------------------------------------------------------
# loss


def test_untrained_loss_is_ln_k():
    config = lt.TransformerConfig(K=512, n_c=1, extents=(2, 2, 2), factor=(2, 1, 1), d_model=8, heads=2,
                                  encoder_layers=1, decoder_layers=1, ff_width=8, prime_frames=0)
    params = lt.init_params(config)
    grid = torch.randint(0, 512, (3, 2, 2, 2, 1), generator=nx.make_generator(0))
    loss = float(lt.nll_loss(params.params, config, grid).detach())
    assert abs(loss - math.log(512)) < 1e-5
    assert abs(metrics.bits_per_dim(loss) - loss / math.log(2)) < 1e-12


def test_loss_excludes_priming_positions(random_model):
    config, params = random_model
    grid = random_grid(config, 3)
    logits = lt.forward(params.params, config, grid, prime_frames=2)
    plan = config.plan()
    targets = grid.view(1, -1, 2)[:, torch.from_numpy(plan.flat_order.copy())]
    nll = -torch.log_softmax(logits, -1).gather(-1, targets[..., None])[..., 0]
    keep = np.array([p[0] >= 2 for p in plan.order])
    expected = nll[:, torch.from_numpy(keep)].mean()
    assert torch.allclose(lt.nll_loss(params.params, config, grid, prime_frames=2), expected, atol=1e-12)


def test_constant_dataset_memorized():
    config = tiny_config(K=8, extents=(4, 2, 2), factor=(4, 1, 1), d_model=16, ff_width=16)
    params = lt.init_params(config, seed=0)
    grid = torch.zeros(2, 4, 2, 2, 2, dtype=torch.long)
    for _ in range(500):
        loss = lt.nll_loss(params.params, config, grid)
        nx.adam_step(params, nx.backward(loss, params), lr=1e-2)
    assert float(lt.nll_loss(params.params, config, grid).detach()) < 0.01


def test_permuted_codes_give_identical_loss(random_model):
    config, params = random_model
    gen = nx.make_generator(11)
    perm = torch.randperm(config.K, generator=gen)
    inv = torch.argsort(perm)
    grid = random_grid(config, 12)
    moved = nx.ParamStore()
    for name, p in params.params.items():
        q = p.detach().clone()
        if name.startswith("emb.tok"):
            q[: config.K] = p.detach()[: config.K][inv]
        elif name.startswith("head.chan"):
            q = p.detach()[inv]
        elif name == "head.w2":
            q = p.detach()[:, inv]
        elif name == "head.b2":
            q = p.detach()[inv]
        moved.add(name, q)
    a = lt.nll_loss(params.params, config, grid)
    b = lt.nll_loss(moved.params, config, perm[grid])
    assert abs(float(a.detach()) - float(b.detach())) < 1e-12


def _grad_params(params, loss_fn):
    loss = loss_fn()
    # channel 1 never reads head.query0, so its zero gradient is expected
    grads = nx.backward(loss, params, [n for n in params.names() if n != "head.query0"])
    worst, where = 0.0, ""
    for name in grads:
        (numeric,) = fd_gradient(loss_fn, [params[name]])
        err = relative_error(grads[name], numeric)
        if err > worst:
            worst, where = err, name
    return worst, where


@pytest.mark.parametrize("variant", lt.VARIANTS)
def test_decode_logits_gradients(variant):
    config = tiny_config(extents=(2, 2, 2), factor=(2, 1, 1), max_relative=(1, 1, 1), d_model=4, ff_width=4,
                         attention_variant=variant)
    params = randomize(lt.init_params(config, seed=0, dtype=D64), seed=1)
    grid = random_grid(config, 2)
    weights = torch.randn(config.K, generator=nx.make_generator(3), dtype=D64)

    def loss():
        ctx, _ = lt.encode_context(params.params, config, grid, 1)
        return (lt.decode_logits(params.params, config, grid, ctx, 1, 3, 1) * weights).sum()

    worst, where = _grad_params(params, loss)
    assert worst < 1e-4, f"{where}: {worst:.2e}"


@pytest.mark.parametrize("variant", lt.VARIANTS)
def test_nll_loss_gradients(variant):
    config = tiny_config(extents=(2, 2, 2), factor=(1, 2, 1), max_relative=(1, 1, 1), d_model=4, ff_width=4,
                         attention_variant=variant, prime_frames=1)
    params = randomize(lt.init_params(config, seed=4, dtype=D64), seed=5)
    grid = random_grid(config, 6)
    worst, where = _grad_params(params, lambda: lt.nll_loss(params.params, config, grid))
    assert worst < 1e-4, f"{where}: {worst:.2e}"
