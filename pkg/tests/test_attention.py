"""Attention variants vs naive-loop and masked-global oracles."""

import numpy as np
import pytest

from flowdit import attention as A
from flowdit import tensor as T
from flowdit.tensor import Tensor, ShapeError, grad_check


def make_params(dim, heads, rng, dtype=np.float32):
    params = A.AttentionParams.create(dim, heads, rng)
    if dtype == np.float64:
        for t in params.tensors():
            t.data = t.data.astype(np.float64)
    return params


def token_coords(grid):
    x, y, z = grid
    coords = []
    for i in range(x * y * z):
        coords.append((i // (y * z), (i // z) % y, i % z))
    return coords


def naive_attention(x, ctx, params, mask=None):
    """Per-head python-loop oracle: Linear(attention) without residual."""
    b, L, dim = x.shape
    heads = params.heads
    dh = dim // heads
    wq, wk, wv, wo = [p.data.astype(np.float64) for p in params.tensors()]
    out = np.zeros((b, L, dim))
    for bi in range(b):
        q = x[bi].astype(np.float64) @ wq
        k = ctx[bi].astype(np.float64) @ wk
        v = ctx[bi].astype(np.float64) @ wv
        merged = np.zeros((L, dim))
        for h in range(heads):
            qs = q[:, h * dh:(h + 1) * dh]
            ks = k[:, h * dh:(h + 1) * dh]
            vs = v[:, h * dh:(h + 1) * dh]
            s = qs @ ks.T / np.sqrt(dh)
            if mask is not None:
                s = np.where(mask, s, -np.inf)
            s = s - s.max(axis=1, keepdims=True)
            p = np.exp(s)
            p /= p.sum(axis=1, keepdims=True)
            merged[:, h * dh:(h + 1) * dh] = p @ vs
        out[bi] = merged @ wo
    return out


def window_mask(grid, w):
    coords = token_coords(grid)
    blocks = [(cx // w, cy // w, cz // w) for cx, cy, cz in coords]
    n = len(coords)
    return np.array([[blocks[i] == blocks[j] for j in range(n)] for i in range(n)])


def plane_mask(grid, axis):
    coords = token_coords(grid)
    n = len(coords)
    return np.array([[coords[i][axis] == coords[j][axis] for j in range(n)] for i in range(n)])


# ---------------------------------------------------------------------------
# global attention


def test_global_single_token():
    rng = np.random.default_rng(0)
    params = make_params(8, 2, rng)
    x = rng.standard_normal((1, 1, 8)).astype(np.float32)
    tg = A.TokenGrid(Tensor(x), (1, 1, 1))
    out = A.global_attention(tg, params)
    expected = x[0] @ params.wv.data @ params.wo.data + x[0]
    np.testing.assert_allclose(out.tokens.data[0], expected, atol=1e-5)


def test_global_identical_tokens_identical_outputs():
    rng = np.random.default_rng(1)
    params = make_params(16, 4, rng)
    row = rng.standard_normal(16).astype(np.float32)
    x = np.tile(row, (1, 6, 1))
    out = A.global_attention(A.TokenGrid(Tensor(x), (1, 2, 3)), params)
    first = out.tokens.data[0, 0]
    for j in range(6):
        np.testing.assert_allclose(out.tokens.data[0, j], first, atol=1e-6)


def test_global_vs_naive_loop_oracle():
    rng = np.random.default_rng(2)
    params = make_params(16, 2, rng, dtype=np.float64)
    x = rng.standard_normal((2, 8, 16))
    tg = A.TokenGrid(Tensor(x), (2, 2, 2))
    out = A.global_attention(tg, params)
    oracle = naive_attention(x, x, params) + x
    assert np.abs(out.tokens.data - oracle).max() < 1e-6


def test_global_head_divisibility_error():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeError):
        A.AttentionParams.create(10, 3, rng)


# ---------------------------------------------------------------------------
# window attention


def test_window_covering_grid_equals_global():
    rng = np.random.default_rng(4)
    params = make_params(16, 4, rng)
    x = rng.standard_normal((2, 64, 16)).astype(np.float32)
    tg = A.TokenGrid(Tensor(x), (4, 4, 4))
    win = A.window_attention(tg, 4, params)
    glob = A.global_attention(tg, params)
    assert np.abs(win.tokens.data - glob.tokens.data).max() < 1e-5


def test_window_grouping_8_cubed_w4():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((1, 512, 4)).astype(np.float32))
    grouped = A.group_window(x, (8, 8, 8), 4)
    assert grouped.shape == (8, 64, 4)
    back = A.ungroup_window(grouped, (8, 8, 8), 4, 1)
    np.testing.assert_array_equal(back.data, x.data)


def test_window_group_membership_index_arithmetic():
    grid = (4, 4, 4)
    coords = token_coords(grid)
    x = np.arange(64, dtype=np.float32).reshape(1, 64, 1)
    grouped = A.group_window(Tensor(x), grid, 2).data
    for g in range(grouped.shape[0]):
        blocks = {tuple(c // 2 for c in coords[int(i)]) for i in grouped[g, :, 0]}
        assert len(blocks) == 1


def test_window_equals_masked_global_oracle():
    rng = np.random.default_rng(6)
    grid = (4, 4, 4)
    mask = window_mask(grid, 2)
    for seed in range(10):
        r = np.random.default_rng(seed)
        params = make_params(16, 4, r)
        x = r.standard_normal((2, 64, 16)).astype(np.float32)
        out = A.window_attention(A.TokenGrid(Tensor(x), grid), 2, params)
        oracle = naive_attention(x, x, params, mask=mask) + x
        assert np.abs(out.tokens.data - oracle).max() < 1e-5


def test_window_divisibility_error():
    rng = np.random.default_rng(7)
    params = make_params(8, 2, rng)
    x = Tensor(rng.standard_normal((1, 27, 8)).astype(np.float32))
    with pytest.raises(ShapeError):
        A.window_attention(A.TokenGrid(x, (3, 3, 3)), 2, params)


# ---------------------------------------------------------------------------
# plane attention


def test_plane_single_plane_equals_global():
    rng = np.random.default_rng(8)
    params = make_params(16, 4, rng)
    x = rng.standard_normal((2, 12, 16)).astype(np.float32)
    tg = A.TokenGrid(Tensor(x), (1, 3, 4))
    out = A.plane_attention(tg, 0, params)
    glob = A.global_attention(tg, params)
    assert np.abs(out.tokens.data - glob.tokens.data).max() < 1e-5


def test_plane_group_membership_index_arithmetic():
    grid = (4, 4, 4)
    coords = token_coords(grid)
    x = np.arange(64, dtype=np.float32).reshape(1, 64, 1)
    for axis in range(3):
        grouped = A.group_plane(Tensor(x), grid, axis).data
        assert grouped.shape == (4, 16, 1)
        for g in range(4):
            vals = {coords[int(i)][axis] for i in grouped[g, :, 0]}
            assert vals == {g}
        back = A.ungroup_plane(Tensor(grouped), grid, axis, 1)
        np.testing.assert_array_equal(back.data, x)


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_plane_equals_masked_global_oracle(axis):
    grid = (3, 4, 5)
    mask = plane_mask(grid, axis)
    for seed in range(10):
        r = np.random.default_rng(seed)
        params = make_params(12, 3, r)
        x = r.standard_normal((2, 60, 12)).astype(np.float32)
        out = A.plane_attention(A.TokenGrid(Tensor(x), grid), axis, params)
        oracle = naive_attention(x, x, params, mask=mask) + x
        assert np.abs(out.tokens.data - oracle).max() < 1e-5


# ---------------------------------------------------------------------------
# cross attention


def test_cross_single_zero_context_token():
    rng = np.random.default_rng(9)
    params = make_params(8, 2, rng)
    x = rng.standard_normal((2, 4, 8)).astype(np.float32)
    ctx = Tensor(np.zeros((2, 1, 8), dtype=np.float32))
    out = A.cross_attention(A.TokenGrid(Tensor(x), (1, 2, 2)), ctx, params)
    np.testing.assert_array_equal(out.tokens.data, x)  # V(0) projects to 0


def test_cross_with_self_context_equals_global():
    rng = np.random.default_rng(10)
    params = make_params(16, 4, rng)
    x = rng.standard_normal((2, 8, 16)).astype(np.float32)
    tg = A.TokenGrid(Tensor(x), (2, 2, 2))
    crossed = A.cross_attention(tg, Tensor(x), params)
    glob = A.global_attention(tg, params)
    np.testing.assert_allclose(crossed.tokens.data, glob.tokens.data, atol=1e-6)


def test_cross_vs_naive_loop_oracle():
    rng = np.random.default_rng(11)
    params = make_params(16, 2, rng, dtype=np.float64)
    x = rng.standard_normal((2, 6, 16))
    ctx = rng.standard_normal((2, 5, 16))
    out = A.cross_attention(A.TokenGrid(Tensor(x), (1, 2, 3)), Tensor(ctx), params)
    oracle = naive_attention(x, ctx, params) + x
    assert np.abs(out.tokens.data - oracle).max() < 1e-6


def test_cross_dimension_mismatch():
    rng = np.random.default_rng(12)
    params = make_params(8, 2, rng)
    x = Tensor(rng.standard_normal((1, 4, 8)).astype(np.float32))
    ctx = Tensor(rng.standard_normal((1, 4, 6)).astype(np.float32))
    with pytest.raises(ShapeError):
        A.cross_attention(A.TokenGrid(x, (1, 2, 2)), ctx, params)


# ---------------------------------------------------------------------------
# FLOP accounting


def test_flops_global():
    assert A.attention_flops("global", 512, 384) == 2 * 512 * 512 * 384


def test_flops_window_factor_eight():
    L, D, w = 512, 384, 4
    assert A.attention_flops("global", L, D) // A.attention_flops("window", L, D, w=w) == 8
    assert A.attention_flops("window", L, D, w=w) == 2 * L * w ** 3 * D


def test_flops_plane():
    grid = (8, 8, 8)
    L, D = 512, 64
    assert A.attention_flops("plane-x", L, D, grid=grid) == 2 * L * 64 * D
    ratio = A.attention_flops("global", L, D) / A.attention_flops("plane-x", L, D, grid=grid)
    assert ratio == L / 64


def test_flops_ratio_exact_property():
    for grid in [(4, 4, 4), (8, 4, 2), (8, 8, 8)]:
        L = grid[0] * grid[1] * grid[2]
        for w in (2,):
            ratio = A.attention_flops("global", L, 96) / A.attention_flops("window", L, 96, w=w)
            assert ratio == L / w ** 3
        for mode, axis in A.AXIS_FOR.items():
            plane = L // grid[axis]
            ratio = A.attention_flops("global", L, 96) / A.attention_flops(mode, L, 96, grid=grid)
            assert ratio == L / plane


# ---------------------------------------------------------------------------
# gradients


@pytest.mark.parametrize("variant", ["global", "window", "plane", "cross"])
def test_attention_gradients_finite_difference(variant):
    rng = np.random.default_rng(13)
    grid = (2, 2, 2)
    dim, heads = 8, 2
    params = make_params(dim, heads, rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 8, dim)), requires_grad=True)
    ctx = Tensor(rng.standard_normal((1, 3, dim)), requires_grad=True)

    def run(*_):
        tg = A.TokenGrid(x, grid)
        if variant == "global":
            out = A.global_attention(tg, params)
        elif variant == "window":
            out = A.window_attention(tg, 2, params)
        elif variant == "plane":
            out = A.plane_attention(tg, 1, params)
        else:
            out = A.cross_attention(tg, ctx, params)
        return T.mean(T.mul(out.tokens, out.tokens))

    inputs = [x] + params.tensors() + ([ctx] if variant == "cross" else [])
    report = grad_check(run, inputs, sample=120)
    assert report.max_rel_err < 1e-4, str(report)


# ---------------------------------------------------------------------------
# benchmark harness


def test_benchmark_rows_and_speedups():
    rows = A.benchmark_attention((4, 4, 4), 32, w=2, heads=4, repeats=2)
    modes = {r["mode"] for r in rows}
    assert modes == {"global", "window", "plane-x"}
    per_mode = [r for r in rows if r["mode"] == "global"]
    assert len(per_mode) == 3  # 2 repeats + mean
    ratios = A.benchmark_speedups(rows)
    assert set(ratios) == {"window", "plane-x"}
    for r in rows:
        assert r["wall_ms_forward"] > 0 and r["wall_ms_backward"] > 0


def test_flops_unknown_mode_rejected():
    with pytest.raises(ValueError):
        A.attention_flops("diagonal", 64, 32)
    with pytest.raises(ValueError):
        A.attention_flops("window", 64, 32)  # missing w
    with pytest.raises(ValueError):
        A.attention_flops("plane-x", 64, 32)  # missing grid
