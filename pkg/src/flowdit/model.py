"""The denoiser: 3D patchify, sinusoidal embeddings, conditioned transformer
layers, slice encoder, and the noise-prediction head.

Conditioning enters through three streams: padded slice volumes concatenated
onto the input channels, a per-batch condition vector (timestep + slice
summary + plane-position embedding) injected via adaptive layer norm and
residual gates, and slice-encoder tokens attended to by cross-attention.
All modulation MLPs and the output head are zero-initialized, so a freshly
built network is the identity on the residual stream and predicts exactly
zero noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError, write_array, read_array
from . import attention as A
from .attention import AttentionParams
from .planes import plane_embedding_width

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    heads: int
    patch: tuple[int, int, int]
    extents: tuple[int, int, int]
    channels: int = 3
    window: int = 4
    window_attn_layers: tuple[int, ...] = ()
    plane_attn_layers: tuple[int, ...] = ()
    d_pe: int = 64
    max_planes: int = 3
    mask_channel: bool = True
    t_embed_dim: int = 256
    share_plane_weights: bool = False
    enc_layers: int = 2
    enc_patch: int = 4

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "window_attn_layers", tuple(int(i) for i in self.window_attn_layers))
        object.__setattr__(self, "plane_attn_layers", tuple(int(i) for i in self.plane_attn_layers))
        self.validate()

    def validate(self):
        if self.hidden % self.heads:
            raise ShapeError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        for e, p in zip(self.extents, self.patch):
            if e % p:
                raise ShapeError(f"extent {e} not divisible by patch {p}")
        win = set(self.window_attn_layers)
        pla = set(self.plane_attn_layers)
        if win & pla:
            raise ShapeError(f"layers {sorted(win & pla)} listed for both window and plane attention")
        for i in win | pla:
            if not 0 <= i < self.layers:
                raise ShapeError(f"attention layer index {i} outside 0..{self.layers - 1}")
        if win:
            for g in self.grid:
                if g % self.window:
                    raise ShapeError(f"token grid {self.grid} not divisible by window {self.window}")
        if self.t_embed_dim % 2:
            raise ShapeError("t_embed_dim must be even")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(e // p for e, p in zip(self.extents, self.patch))

    @property
    def seq_len(self) -> int:
        x, y, z = self.grid
        return x * y * z

    @property
    def in_channels(self) -> int:
        return 2 * self.channels + (1 if self.mask_channel else 0)

    @property
    def patch_vector(self) -> int:
        px, py, pz = self.patch
        return px * py * pz * self.in_channels

    @property
    def out_vector(self) -> int:
        px, py, pz = self.patch
        return px * py * pz * self.channels

    @property
    def ep_width(self) -> int:
        return plane_embedding_width(self.d_pe, self.max_planes)

    def layer_mode(self, i: int) -> str:
        if i in self.window_attn_layers:
            return "window"
        if i in self.plane_attn_layers:
            return "plane"
        return "global"

    # --- canonical key=value text (checkpoint header / run snapshots) ---

    def to_text(self) -> str:
        lines = []
        for f in dc_fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"cfg.{f.name}={value}")
        return "\n".join(lines)

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        raw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or "=" not in line or not line.startswith("cfg."):
                continue
            key, value = line.split("=", 1)
            raw[key[4:]] = value
        kwargs = {}
        for f in dc_fields(ModelConfig):
            if f.name not in raw:
                continue
            value = raw[f.name]
            if f.name in ("patch", "extents", "window_attn_layers", "plane_attn_layers"):
                kwargs[f.name] = tuple(int(v) for v in value.split(",")) if value else ()
            elif f.name in ("mask_channel", "share_plane_weights"):
                kwargs[f.name] = value == "true"
            else:
                kwargs[f.name] = int(value)
        return ModelConfig(**kwargs)


def small(extents=(32, 32, 32), patch=(4, 4, 4), **kw) -> ModelConfig:
    return ModelConfig(layers=8, hidden=384, heads=6, patch=patch, extents=extents, **kw)


def small_star(extents=(32, 32, 32), patch=(4, 4, 4), **kw) -> ModelConfig:
    return ModelConfig(layers=8, hidden=384, heads=6, patch=patch, extents=extents,
                       window_attn_layers=(1, 4), plane_attn_layers=(2, 5), **kw)


def base(extents=(32, 32, 32), patch=(4, 4, 4), **kw) -> ModelConfig:
    return ModelConfig(layers=10, hidden=648, heads=8, patch=patch, extents=extents, **kw)


def base_star(extents=(32, 32, 32), patch=(4, 4, 4), **kw) -> ModelConfig:
    return ModelConfig(layers=10, hidden=648, heads=8, patch=patch, extents=extents,
                       window_attn_layers=(1, 4, 7), plane_attn_layers=(2, 5, 8), **kw)


def large(extents=(32, 32, 32), patch=(4, 4, 4), **kw) -> ModelConfig:
    return ModelConfig(layers=12, hidden=768, heads=12, patch=patch, extents=extents, **kw)


def large_star(extents=(32, 32, 32), patch=(4, 4, 4), **kw) -> ModelConfig:
    return ModelConfig(layers=12, hidden=768, heads=12, patch=patch, extents=extents,
                       window_attn_layers=(1, 4, 7, 10), plane_attn_layers=(2, 5, 8, 11), **kw)


def mini(extents=(16, 16, 16), **kw) -> ModelConfig:
    """Desk-scale config used by the overfit and profile experiments."""
    kw.setdefault("d_pe", 16)
    kw.setdefault("t_embed_dim", 64)
    kw.setdefault("window", 4)
    kw.setdefault("window_attn_layers", (1,))
    kw.setdefault("plane_attn_layers", (2,))
    return ModelConfig(layers=4, hidden=128, heads=4, patch=(2, 2, 2), extents=extents, **kw)


PRESETS = {
    "small": small, "small-star": small_star,
    "base": base, "base-star": base_star,
    "large": large, "large-star": large_star,
    "mini": mini,
}


# ---------------------------------------------------------------------------
# deterministic embeddings


def sincos_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos features of integer positions; dim must be even."""
    half = dim // 2
    freqs = 1.0 / np.power(10000.0, 2.0 * np.arange(half) / dim)
    args = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.empty((len(positions), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(args)
    out[:, 1::2] = np.cos(args)
    return out


def grid_positional_embedding(grid: tuple[int, ...], dim: int) -> np.ndarray:
    """Per-axis sinusoidal embedding of grid coordinates, concatenated.

    The dimension budget is split evenly across axes (rounded down to even);
    any remainder is zero padding. Row order matches the row-major token
    layout of the grid.
    """
    n_axes = len(grid)
    per_axis = (dim // n_axes) // 2 * 2
    coords = np.stack(np.meshgrid(*[np.arange(g) for g in grid], indexing="ij"),
                      axis=-1).reshape(-1, n_axes)
    out = np.zeros((coords.shape[0], dim), dtype=np.float64)
    for ax in range(n_axes):
        block = sincos_embedding(coords[:, ax], per_axis)
        out[:, ax * per_axis:(ax + 1) * per_axis] = block
    return out


def positional_embedding_3d(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    return grid_positional_embedding(grid, dim)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    return sincos_embedding(np.atleast_1d(np.asarray(t)), dim)


# ---------------------------------------------------------------------------
# patchify / unpatchify


def patchify(s: Tensor, patch, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Non-overlapping patch flattening + linear projection to model width.

    Equivalent to a stride-p convolution with kernel size p. Token order is
    row-major over the patch grid.
    """
    b, dx, dy, dz, ch = s.shape
    px, py, pz = patch
    if dx % px or dy % py or dz % pz:
        raise ShapeError(f"extents {(dx, dy, dz)} not divisible by patch {patch}")
    gx, gy, gz = dx // px, dy // py, dz // pz
    t = T.reshape(s, (b, gx, px, gy, py, gz, pz, ch))
    t = T.transpose(t, (0, 1, 3, 5, 2, 4, 6, 7))
    t = T.reshape(t, (b, gx * gy * gz, px * py * pz * ch))
    out = T.matmul(t, weight)
    if bias is not None:
        out = T.add(out, bias)
    return out


def unpatchify(tokens: Tensor, grid, patch, channels: int) -> Tensor:
    """Inverse token layout: (B, L, px*py*pz*c) -> (B, dx, dy, dz, c)."""
    b = tokens.shape[0]
    gx, gy, gz = grid
    px, py, pz = patch
    t = T.reshape(tokens, (b, gx, gy, gz, px, py, pz, channels))
    t = T.transpose(t, (0, 1, 4, 2, 5, 3, 6, 7))
    return T.reshape(t, (b, gx * px, gy * py, gz * pz, channels))


# ---------------------------------------------------------------------------
# conditioning sub-ops


def adaln_modulate(x: Tensor, cond: Tensor, weight: Tensor, bias: Tensor,
                   eps: float = 1e-5) -> Tensor:
    """(1 + gamma) * LN(x) + beta with (beta, gamma) = MLP(cond), broadcast
    over tokens. Zero-initialized MLPs make this plain layer norm."""
    normed = T.layer_norm(x, axis=-1, eps=eps)
    mod = T.add(T.matmul(T.gelu(cond), weight), bias)
    dim = x.shape[-1]
    mod = T.reshape(mod, (cond.shape[0], 1, 2 * dim))
    beta, gamma = T.split(mod, [dim, dim], axis=-1)
    return T.add(T.mul(normed, T.add(gamma, 1.0)), beta)


def residual_scale(branch: Tensor, cond: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Gate a sub-layer branch by alpha = MLP(cond) before the residual add."""
    alpha = T.add(T.matmul(T.gelu(cond), weight), bias)
    alpha = T.reshape(alpha, (cond.shape[0], 1, branch.shape[-1]))
    return T.mul(branch, alpha)


# ---------------------------------------------------------------------------
# the denoiser


class FlowDiT:
    """Noise-prediction transformer over patchified voxel fields."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        self._pos3d = grid_positional_embedding(cfg.grid, cfg.hidden).astype(self.dtype)[None]
        enc_grid = self._enc_grid()
        self._enc_pos = grid_positional_embedding(enc_grid, cfg.hidden).astype(self.dtype)[None]

    # --- parameter construction ---

    def _enc_grid(self):
        d1, d2 = self._slice_face()
        return (d1 // self.cfg.enc_patch, d2 // self.cfg.enc_patch)

    def _slice_face(self):
        dx, dy, dz = self.cfg.extents
        if not (dx == dy == dz):
            # axis-aligned faces of a non-cubic grid differ; the encoder
            # patches each face extent independently only for cubic grids
            raise ShapeError("slice encoder requires cubic extents")
        return dx, dx

    def _weight(self, rng, fan_in, fan_out, name):
        scale = np.sqrt(1.0 / fan_in)
        data = (rng.standard_normal((fan_in, fan_out)) * scale).astype(self.dtype)
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def _bias(self, name, size):
        self.params[name] = Tensor(np.zeros(size, dtype=self.dtype), requires_grad=True, name=name)

    def _zeros(self, name, shape):
        self.params[name] = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True, name=name)

    def _scalar(self, name, value):
        self.params[name] = Tensor(np.full(1, value, dtype=self.dtype), requires_grad=True, name=name)

    def _attn(self, rng, prefix):
        d = self.cfg.hidden
        for part in ("wq", "wk", "wv", "wo"):
            self._weight(rng, d, d, f"{prefix}.{part}")

    def _mlp(self, rng, prefix, d_in, d_hidden, d_out):
        self._weight(rng, d_in, d_hidden, f"{prefix}.w1")
        self._bias(f"{prefix}.b1", d_hidden)
        self._weight(rng, d_hidden, d_out, f"{prefix}.w2")
        self._bias(f"{prefix}.b2", d_out)

    def _modulation(self, prefix):
        d = self.cfg.hidden
        self._zeros(f"{prefix}.mod.w", (d, 2 * d))
        self._zeros(f"{prefix}.mod.b", 2 * d)
        self._zeros(f"{prefix}.scale.w", (d, d))
        self._zeros(f"{prefix}.scale.b", d)

    def _init_params(self, rng):
        cfg = self.cfg
        d = cfg.hidden
        self._weight(rng, cfg.patch_vector, d, "patch.w")
        self._bias("patch.b", d)
        self._mlp(rng, "t_mlp", cfg.t_embed_dim, d, d)
        self._mlp(rng, "ep_mlp", cfg.ep_width, d, d)
        self._mlp(rng, "fp_mlp", cfg.max_planes * d, d, d)
        self._scalar("lambda1", 1.0)
        self._scalar("lambda2", 1.0)

        # slice encoder (stand-in for a pretrained image encoder)
        enc_in = cfg.enc_patch * cfg.enc_patch * cfg.channels
        self._weight(rng, enc_in, d, "enc.patch.w")
        self._bias("enc.patch.b", d)
        self.params["enc.cls"] = Tensor(
            (rng.standard_normal((1, 1, d)) * 0.02).astype(self.dtype), requires_grad=True,
            name="enc.cls")
        for j in range(cfg.enc_layers):
            self._attn(rng, f"enc.{j}.attn")
            self._mlp(rng, f"enc.{j}.ffn", d, 4 * d, d)

        for i in range(cfg.layers):
            passes = self._self_passes(i)
            for p in range(passes):
                self._attn(rng, f"layers.{i}.self.{p}")
            self._modulation(f"layers.{i}.self")
            self._attn(rng, f"layers.{i}.cross")
            self._modulation(f"layers.{i}.cross")
            self._mlp(rng, f"layers.{i}.ffn", d, 4 * d, d)
            self._modulation(f"layers.{i}.ffn")

        self._zeros("final.mod.w", (d, 2 * d))
        self._zeros("final.mod.b", 2 * d)
        self._zeros("head.w", (d, cfg.out_vector))
        self._zeros("head.b", cfg.out_vector)

    def _self_passes(self, i):
        if self.cfg.layer_mode(i) == "plane" and not self.cfg.share_plane_weights:
            return 3
        return 1

    def _attn_params(self, prefix) -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"{prefix}.wq"], p[f"{prefix}.wk"], p[f"{prefix}.wv"],
                               p[f"{prefix}.wo"], heads=self.cfg.heads)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    # --- forward pieces ---

    def encode_slices(self, slice_stack: np.ndarray | None):
        """2D-patchify + transformer encode a (B, n, d1, d2, c) slice stack.

        Returns the projected global summary (B, D) and the per-patch context
        tokens (B, n*K, D); (zeros, None) when no planes are given.
        """
        cfg = self.cfg
        d = cfg.hidden
        if slice_stack is None or slice_stack.shape[1] == 0:
            batch = 1 if slice_stack is None else slice_stack.shape[0]
            return Tensor(np.zeros((batch, d), dtype=self.dtype)), None
        b, n, d1, d2, ch = slice_stack.shape
        if n > cfg.max_planes:
            raise ShapeError(f"{n} planes exceed max_planes={cfg.max_planes}")
        p = cfg.enc_patch
        flat = Tensor(np.ascontiguousarray(slice_stack, dtype=self.dtype).reshape(
            b * n, d1, d2, ch))
        t = T.reshape(flat, (b * n, d1 // p, p, d2 // p, p, ch))
        t = T.transpose(t, (0, 1, 3, 2, 4, 5))
        k = (d1 // p) * (d2 // p)
        t = T.reshape(t, (b * n, k, p * p * ch))
        t = T.add(T.matmul(t, self.params["enc.patch.w"]), self.params["enc.patch.b"])
        t = T.add(t, Tensor(self._enc_pos))

        cls = T.add(Tensor(np.zeros((b * n, 1, d), dtype=self.dtype)), self.params["enc.cls"])
        t = T.concatenate([cls, t], axis=1)
        for j in range(cfg.enc_layers):
            normed = T.layer_norm(t)
            t = T.add(t, A.attention_core(normed, normed, self._attn_params(f"enc.{j}.attn")))
            h = T.layer_norm(t)
            h = T.gelu(T.add(T.matmul(h, self.params[f"enc.{j}.ffn.w1"]), self.params[f"enc.{j}.ffn.b1"]))
            h = T.add(T.matmul(h, self.params[f"enc.{j}.ffn.w2"]), self.params[f"enc.{j}.ffn.b2"])
            t = T.add(t, h)

        pieces = T.split(t, [1, k], axis=1)
        cls_out = T.reshape(pieces[0], (b, n * d))
        if n < cfg.max_planes:
            pad = Tensor(np.zeros((b, (cfg.max_planes - n) * d), dtype=self.dtype))
            cls_out = T.concatenate([cls_out, pad], axis=1)
        h = T.gelu(T.add(T.matmul(cls_out, self.params["fp_mlp.w1"]), self.params["fp_mlp.b1"]))
        fp = T.add(T.matmul(h, self.params["fp_mlp.w2"]), self.params["fp_mlp.b2"])
        context = T.reshape(pieces[1], (b, n * k, d))
        return fp, context

    def condition(self, t_steps: np.ndarray, fp: Tensor, e_p: np.ndarray) -> Tensor:
        """c = t_emb + lambda1 * F_P + lambda2 * projected E_P."""
        cfg = self.cfg
        t_steps = np.atleast_1d(np.asarray(t_steps))
        if np.any(t_steps < 0):
            raise ValueError("timesteps must be non-negative")
        t_sin = Tensor(timestep_embedding(t_steps, cfg.t_embed_dim).astype(self.dtype))
        h = T.gelu(T.add(T.matmul(t_sin, self.params["t_mlp.w1"]), self.params["t_mlp.b1"]))
        t_emb = T.add(T.matmul(h, self.params["t_mlp.w2"]), self.params["t_mlp.b2"])

        e_p = Tensor(np.atleast_2d(np.asarray(e_p)).astype(self.dtype))
        if e_p.shape[-1] != cfg.ep_width:
            raise ShapeError(f"plane embedding width {e_p.shape[-1]} != {cfg.ep_width}")
        h = T.gelu(T.add(T.matmul(e_p, self.params["ep_mlp.w1"]), self.params["ep_mlp.b1"]))
        ep_emb = T.add(T.matmul(h, self.params["ep_mlp.w2"]), self.params["ep_mlp.b2"])

        return T.add(T.add(t_emb, T.mul(fp, self.params["lambda1"])),
                     T.mul(ep_emb, self.params["lambda2"]))

    def _modulated(self, x, cond, prefix, branch_fn):
        p = self.params
        h = adaln_modulate(x, cond, p[f"{prefix}.mod.w"], p[f"{prefix}.mod.b"])
        branch = branch_fn(h)
        return T.add(x, residual_scale(branch, cond, p[f"{prefix}.scale.w"], p[f"{prefix}.scale.b"]))

    def run_layer(self, x: Tensor, i: int, cond: Tensor, context: Tensor | None) -> Tensor:
        cfg = self.cfg
        grid = cfg.grid
        mode = cfg.layer_mode(i)
        prefix = f"layers.{i}"

        if mode == "plane":
            for axis in range(3):
                pass_idx = 0 if cfg.share_plane_weights else axis
                params = self._attn_params(f"{prefix}.self.{pass_idx}")
                x = self._modulated(x, cond, f"{prefix}.self",
                                    lambda h, ax=axis, pr=params: A.plane_core(h, grid, ax, pr))
        elif mode == "window":
            params = self._attn_params(f"{prefix}.self.0")
            x = self._modulated(x, cond, f"{prefix}.self",
                                lambda h: A.window_core(h, grid, cfg.window, params))
        else:
            params = self._attn_params(f"{prefix}.self.0")
            x = self._modulated(x, cond, f"{prefix}.self",
                                lambda h: A.global_core(h, params))

        if context is not None:
            params = self._attn_params(f"{prefix}.cross")
            x = self._modulated(x, cond, f"{prefix}.cross",
                                lambda h: A.cross_core(h, context, params))

        def ffn(h):
            h = T.gelu(T.add(T.matmul(h, self.params[f"{prefix}.ffn.w1"]),
                             self.params[f"{prefix}.ffn.b1"]))
            return T.add(T.matmul(h, self.params[f"{prefix}.ffn.w2"]),
                         self.params[f"{prefix}.ffn.b2"])

        return self._modulated(x, cond, f"{prefix}.ffn", ffn)

    def forward(self, s_in, t_steps, slice_stack=None, e_p=None) -> Tensor:
        """Predict the injected noise for a noisy+conditioning channel stack.

        s_in: (B, dx, dy, dz, in_channels) with layout [noisy c | padded
        condition c | mask]; t_steps: (B,) ints; slice_stack: (B, n, d1, d2, c)
        or None; e_p: (B, ep_width) or None. Returns (B, dx, dy, dz, c).
        """
        cfg = self.cfg
        if not isinstance(s_in, Tensor):
            s_in = Tensor(np.asarray(s_in, dtype=self.dtype))
        b = s_in.shape[0]
        expected = (b,) + cfg.extents + (cfg.in_channels,)
        if s_in.shape != expected:
            raise ShapeError(f"input shape {s_in.shape} != expected {expected}")
        if e_p is None:
            e_p = np.zeros((b, cfg.ep_width), dtype=self.dtype)

        x = patchify(s_in, cfg.patch, self.params["patch.w"], self.params["patch.b"])
        x = T.add(x, Tensor(self._pos3d))
        fp, context = self.encode_slices(slice_stack)
        if slice_stack is None and b > 1:
            fp = Tensor(np.zeros((b, cfg.hidden), dtype=self.dtype))
        cond = self.condition(t_steps, fp, e_p)
        for i in range(cfg.layers):
            x = self.run_layer(x, i, cond, context)
        x = adaln_modulate(x, cond, self.params["final.mod.w"], self.params["final.mod.b"])
        x = T.add(T.matmul(x, self.params["head.w"]), self.params["head.b"])
        return unpatchify(x, cfg.grid, cfg.patch, cfg.channels)

    # --- persistence ---

    def save(self, path, extra_text: dict | None = None,
             extra_arrays: dict[str, np.ndarray] | None = None):
        save_checkpoint(path, self.cfg,
                        {k: v.data for k, v in self.params.items()},
                        extra_text=extra_text, extra_arrays=extra_arrays)

    @classmethod
    def load(cls, path) -> tuple["FlowDiT", dict, dict]:
        cfg, arrays, text = load_checkpoint(path)
        model = cls(cfg, seed=0)
        extra_arrays = {}
        for name, arr in arrays.items():
            if name in model.params:
                if model.params[name].data.shape != arr.shape:
                    raise ShapeError(f"checkpoint record {name} has shape {arr.shape}, "
                                     f"model expects {model.params[name].data.shape}")
                model.params[name] = Tensor(arr.astype(model.dtype), requires_grad=True, name=name)
            else:
                extra_arrays[name] = arr
        missing = set(model.params) - set(arrays)
        if missing:
            raise ShapeError(f"checkpoint missing parameter records: {sorted(missing)[:4]}")
        return model, text, extra_arrays


def save_checkpoint(path, cfg: ModelConfig, arrays: dict[str, np.ndarray],
                    extra_text: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None):
    """version | text block (config + extras) | named float32 tensor records."""
    lines = [cfg.to_text()]
    for key, value in (extra_text or {}).items():
        lines.append(f"{key}={value}")
    text = ("\n".join(lines) + "\n").encode("utf-8")
    records = dict(arrays)
    records.update(extra_arrays or {})
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(records)))
        for name in records:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            write_array(fh, records[name])


def load_checkpoint(path):
    with open(path, "rb") as fh:
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise IOError(f"unsupported checkpoint version {version}")
        (text_len,) = struct.unpack("<I", fh.read(4))
        text = fh.read(text_len).decode("utf-8")
        cfg = ModelConfig.from_text(text)
        extras = {}
        for line in text.splitlines():
            if "=" in line and not line.startswith("cfg."):
                key, value = line.split("=", 1)
                extras[key] = value
        (n_records,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            arrays[name] = read_array(fh)
    return cfg, arrays, extras
