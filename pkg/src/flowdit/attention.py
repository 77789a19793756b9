"""Multi-head global, window, plane, and cross attention over 3D token grids.

Tokens lie on an (X, Y, Z) grid in row-major order: sequence position
``x*(Y*Z) + y*Z + z`` holds the token for patch coordinate (x, y, z). Window
and plane attention are pure index regrouping (reshape/transpose, O(L) data
movement) around the same scaled-dot-product core, restricting attention to
w**3 spatial blocks or to tokens sharing one grid coordinate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, Tape, ShapeError

MODES = ("global", "window", "plane-x", "plane-y", "plane-z")


@dataclass
class TokenGrid:
    """B x L x D tokens plus the (X, Y, Z) grid they were flattened from."""

    tokens: Tensor
    grid: tuple[int, int, int]

    def __post_init__(self):
        x, y, z = self.grid
        if self.tokens.shape[1] != x * y * z:
            raise ShapeError(f"L={self.tokens.shape[1]} != X*Y*Z={x * y * z}")


@dataclass
class AttentionParams:
    """Per-attention projection matrices W_Q/W_K/W_V/W_O (all D x D)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @staticmethod
    def create(dim: int, heads: int, rng: np.random.Generator, dtype=np.float32) -> "AttentionParams":
        if dim % heads != 0:
            raise ShapeError(f"hidden size {dim} not divisible by {heads} heads")
        scale = np.sqrt(1.0 / dim)
        mats = [
            Tensor((rng.standard_normal((dim, dim)) * scale).astype(dtype), requires_grad=True)
            for _ in range(4)
        ]
        return AttentionParams(*mats, heads=heads)

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


def attention_core(queries: Tensor, keys_values: Tensor, params: AttentionParams) -> Tensor:
    """Projected multi-head scaled-dot-product attention, no residual.

    queries: (G, n, D); keys_values: (G, m, D); returns (G, n, D).
    """
    g, n, dim = queries.shape
    m = keys_values.shape[1]
    h = params.heads
    if dim % h != 0:
        raise ShapeError(f"hidden size {dim} not divisible by {h} heads")
    dh = dim // h

    def split_heads(t, length):
        t = T.reshape(t, (g, length, h, dh))
        t = T.transpose(t, (0, 2, 1, 3))
        return T.reshape(t, (g * h, length, dh))

    q = split_heads(T.matmul(queries, params.wq), n)
    k = split_heads(T.matmul(keys_values, params.wk), m)
    v = split_heads(T.matmul(keys_values, params.wv), m)

    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)

    ctx = T.reshape(ctx, (g, h, n, dh))
    ctx = T.transpose(ctx, (0, 2, 1, 3))
    ctx = T.reshape(ctx, (g, n, dim))
    return T.matmul(ctx, params.wo)


# ---------------------------------------------------------------------------
# token regrouping


def group_window(tokens: Tensor, grid, w: int) -> Tensor:
    """(B, L, D) -> (B * L/w^3, w^3, D) over non-overlapping w x w x w blocks."""
    x, y, z = grid
    if x % w or y % w or z % w:
        raise ShapeError(f"grid {grid} not divisible by window edge {w}")
    b, _, d = tokens.shape
    t = T.reshape(tokens, (b, x // w, w, y // w, w, z // w, w, d))
    t = T.transpose(t, (0, 1, 3, 5, 2, 4, 6, 7))
    return T.reshape(t, (b * (x // w) * (y // w) * (z // w), w ** 3, d))


def ungroup_window(tokens: Tensor, grid, w: int, batch: int) -> Tensor:
    x, y, z = grid
    d = tokens.shape[-1]
    t = T.reshape(tokens, (batch, x // w, y // w, z // w, w, w, w, d))
    t = T.transpose(t, (0, 1, 4, 2, 5, 3, 6, 7))
    return T.reshape(t, (batch, x * y * z, d))


_PLANE_PERMS = {0: (0, 1, 2, 3, 4), 1: (0, 2, 1, 3, 4), 2: (0, 3, 1, 2, 4)}


def group_plane(tokens: Tensor, grid, axis: int) -> Tensor:
    """(B, L, D) -> (B * extent, plane_size, D) grouping tokens that share
    the given axis coordinate (axis=0 groups yOz planes, etc.)."""
    x, y, z = grid
    b, _, d = tokens.shape
    t = T.reshape(tokens, (b, x, y, z, d))
    t = T.transpose(t, _PLANE_PERMS[axis])
    extent = grid[axis]
    plane = (x * y * z) // extent
    return T.reshape(t, (b * extent, plane, d))


def ungroup_plane(tokens: Tensor, grid, axis: int, batch: int) -> Tensor:
    x, y, z = grid
    d = tokens.shape[-1]
    others = tuple(e for i, e in enumerate(grid) if i != axis)
    t = T.reshape(tokens, (batch, grid[axis]) + others + (d,))
    t = T.transpose(t, tuple(np.argsort(_PLANE_PERMS[axis])))
    return T.reshape(t, (batch, x * y * z, d))


# ---------------------------------------------------------------------------
# cores (no residual) and the public residual-adding ops


def global_core(tokens: Tensor, params: AttentionParams) -> Tensor:
    return attention_core(tokens, tokens, params)


def window_core(tokens: Tensor, grid, w: int, params: AttentionParams) -> Tensor:
    b = tokens.shape[0]
    grouped = group_window(tokens, grid, w)
    out = attention_core(grouped, grouped, params)
    return ungroup_window(out, grid, w, b)


def plane_core(tokens: Tensor, grid, axis: int, params: AttentionParams) -> Tensor:
    b = tokens.shape[0]
    grouped = group_plane(tokens, grid, axis)
    out = attention_core(grouped, grouped, params)
    return ungroup_plane(out, grid, axis, b)


def cross_core(tokens: Tensor, context: Tensor, params: AttentionParams) -> Tensor:
    if context.shape[-1] != tokens.shape[-1]:
        raise ShapeError(
            f"context dim {context.shape[-1]} != token dim {tokens.shape[-1]}"
        )
    return attention_core(tokens, context, params)


def global_attention(tg: TokenGrid, params: AttentionParams) -> TokenGrid:
    """Self-attention over all tokens, output projection, residual added."""
    return TokenGrid(T.add(global_core(tg.tokens, params), tg.tokens), tg.grid)


def window_attention(tg: TokenGrid, w: int, params: AttentionParams) -> TokenGrid:
    """Self-attention restricted to w^3 blocks, residual added."""
    return TokenGrid(T.add(window_core(tg.tokens, tg.grid, w, params), tg.tokens), tg.grid)


def plane_attention(tg: TokenGrid, axis: int, params: AttentionParams) -> TokenGrid:
    """Self-attention restricted to tokens sharing the axis coordinate."""
    return TokenGrid(T.add(plane_core(tg.tokens, tg.grid, axis, params), tg.tokens), tg.grid)


def cross_attention(tg: TokenGrid, context: Tensor, params: AttentionParams) -> TokenGrid:
    """Queries from tokens, keys/values from context, residual added."""
    return TokenGrid(T.add(cross_core(tg.tokens, context, params), tg.tokens), tg.grid)


# ---------------------------------------------------------------------------
# complexity accounting


def attention_flops(mode: str, L: int, D: int, w: int | None = None, grid=None) -> int:
    """Multiply-accumulate count of the QK^T and attn*V stages.

    Projections are excluded: their cost is identical across modes. Global
    costs 2*L^2*D; window 2*L*w^3*D; plane 2*L*plane_size*D.
    """
    if mode == "global":
        return 2 * L * L * D
    if mode == "window":
        if w is None:
            raise ValueError("window mode needs w")
        return 2 * L * w ** 3 * D
    if mode.startswith("plane-"):
        if grid is None:
            raise ValueError("plane mode needs grid")
        axis = AXIS_FOR[mode]
        plane = L // grid[axis]
        return 2 * L * plane * D
    raise ValueError(f"unknown attention mode {mode!r}")


AXIS_FOR = {"plane-x": 0, "plane-y": 1, "plane-z": 2}


# ---------------------------------------------------------------------------
# wall-clock benchmark


def benchmark_attention(grid, D: int, w: int, heads: int, repeats: int = 5,
                        seed: int = 0) -> list[dict]:
    """Time forward+backward of each mode on one batch item.

    Returns one row per (mode, repeat) plus one summary row per mode with the
    mean timings; rows carry mode, L, w, D, flops, wall_ms_forward and
    wall_ms_backward.
    """
    x, y, z = grid
    L = x * y * z
    rng = np.random.default_rng(seed)
    params = AttentionParams.create(D, heads, rng)
    base = rng.standard_normal((1, L, D)).astype(np.float32)

    runs = {
        "global": lambda tg: global_attention(tg, params),
        "window": lambda tg: window_attention(tg, w, params),
        "plane-x": lambda tg: plane_attention(tg, 0, params),
    }
    flops = {
        "global": attention_flops("global", L, D),
        "window": attention_flops("window", L, D, w=w),
        "plane-x": attention_flops("plane-x", L, D, grid=grid),
    }

    rows = []
    for mode, fn in runs.items():
        fwd_ms, bwd_ms = [], []
        for rep in range(repeats):
            tokens = Tensor(base.copy(), requires_grad=True)
            tg = TokenGrid(tokens, grid)
            t0 = time.perf_counter()
            with Tape() as tape:
                out = fn(tg)
                loss = T.mean(T.mul(out.tokens, out.tokens))
            t1 = time.perf_counter()
            tape.backward(loss)
            t2 = time.perf_counter()
            fwd_ms.append((t1 - t0) * 1e3)
            bwd_ms.append((t2 - t1) * 1e3)
            rows.append({
                "mode": mode, "L": L, "w": w, "D": D, "flops": flops[mode],
                "wall_ms_forward": fwd_ms[-1], "wall_ms_backward": bwd_ms[-1],
                "repeat": rep,
            })
        rows.append({
            "mode": mode, "L": L, "w": w, "D": D, "flops": flops[mode],
            "wall_ms_forward": float(np.mean(fwd_ms)),
            "wall_ms_backward": float(np.mean(bwd_ms)),
            "repeat": "mean",
        })
    return rows


def benchmark_speedups(rows: list[dict]) -> dict[str, float]:
    """Forward+backward speedup of each restricted mode over global."""
    means = {r["mode"]: r for r in rows if r["repeat"] == "mean"}
    total = lambda r: r["wall_ms_forward"] + r["wall_ms_backward"]
    out = {}
    for mode, row in means.items():
        if mode != "global":
            out[mode] = total(means["global"]) / total(row)
    return out
