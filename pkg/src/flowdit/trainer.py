"""Optimization loop: AdamW, cosine-annealed learning rate, deterministic
checkpoint/resume, and the plane-conditioning policy used to build batches.

A run directory holds a canonical config snapshot, a metrics.csv with one row
per step, and ``checkpoints/ckpt_<step>`` files in the model checkpoint
format (optimizer moments ride along as extra ``opt.*`` records; the RNG
state is serialized into the header so a resumed run reproduces an
uninterrupted one bit for bit).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .tensor import Tensor, Tape
from . import diffusion as D
from .flowgen import FlowDataset
from .planes import extract_axis_slice


class NanGradientError(RuntimeError):
    """A parameter gradient went non-finite; training cannot continue."""


class DivergenceError(RuntimeError):
    """Loss stayed above the divergence guard for too many steps."""


def cosine_lr(step: int, total_steps: int, lr_max: float = 1e-4, lr_min: float = 0.0) -> float:
    """Half-cosine decay from lr_max at step 0 to lr_min at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(params: dict[str, Tensor], state: "TrainState", lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0):
    """Decoupled-weight-decay Adam update; missing gradients count as zero."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise NanGradientError(f"non-finite gradient in parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps) + lr * weight_decay * p.data
        p.data = (p.data - update).astype(p.data.dtype)
    state.lr = lr


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = (max_norm / norm)
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm


@dataclass
class PlanePolicy:
    """Which slices condition each training sample.

    ``fixed`` uses the same axis:index planes for every sample (None index
    means the center plane); ``random`` draws axis and index uniformly,
    ``n_random`` planes per sample.
    """

    kind: str = "fixed"
    planes: tuple = ((0, None), (1, None))
    n_random: int = 1

    def draw(self, rng: np.random.Generator, extents) -> list[tuple[int, int]]:
        if self.kind == "fixed":
            return [(axis, extents[axis] // 2 if idx is None else idx)
                    for axis, idx in self.planes]
        if self.kind == "random":
            out = []
            for _ in range(self.n_random):
                axis = int(rng.integers(0, 3))
                out.append((axis, int(rng.integers(0, extents[axis]))))
            return out
        raise ValueError(f"unknown plane policy kind {self.kind!r}")

    def to_text(self) -> str:
        planes = ";".join(f"{a}:{'c' if i is None else i}" for a, i in self.planes)
        return f"policy.kind={self.kind}\npolicy.planes={planes}\npolicy.n_random={self.n_random}"


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 4
    lr_max: float = 1e-4
    lr_min: float = 0.0
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ckpt_interval: int = 0      # 0: only the final checkpoint
    loss_target: float | None = None  # early stop when the smoothed loss dips below
    loss_window: int = 50
    guard_factor: float = 10.0
    guard_patience: int = 100
    policy: PlanePolicy = field(default_factory=PlanePolicy)

    def to_text(self) -> str:
        lines = []
        for f in dc_fields(self):
            if f.name == "policy":
                continue
            lines.append(f"train.{f.name}={getattr(self, f.name)}")
        lines.append(self.policy.to_text())
        return "\n".join(lines)


@dataclass
class TrainState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    lr: float = 0.0
    rng: np.random.Generator = None
    best_metric: float = math.inf
    losses: list = field(default_factory=list)


def _rng_state_text(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _rng_from_text(text: str) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = json.loads(text)
    return rng


def save_train_checkpoint(path, model, state: TrainState, extra_text: dict | None = None):
    extra_arrays = {}
    for name, arr in state.m.items():
        extra_arrays[f"opt.m.{name}"] = arr
    for name, arr in state.v.items():
        extra_arrays[f"opt.v.{name}"] = arr
    text = {
        "train.step": str(state.step),
        "train.lr": repr(state.lr),
        "train.best_metric": repr(state.best_metric),
        "train.rng": _rng_state_text(state.rng),
    }
    text.update(extra_text or {})
    model.save(path, extra_text=text, extra_arrays=extra_arrays)


def load_train_checkpoint(path):
    from .model import FlowDiT

    model, text, extra_arrays = FlowDiT.load(path)
    state = TrainState(
        step=int(text["train.step"]),
        lr=float(text["train.lr"]),
        best_metric=float(text["train.best_metric"]),
        rng=_rng_from_text(text["train.rng"]),
    )
    for name, arr in extra_arrays.items():
        if name.startswith("opt.m."):
            state.m[name[6:]] = arr
        elif name.startswith("opt.v."):
            state.v[name[6:]] = arr
    return model, state


def smoothed(losses, window: int) -> float:
    tail = losses[-window:]
    return float(np.mean(tail))


def train(model, dataset: FlowDataset, cfg: TrainConfig, out_dir,
          resume_state: TrainState | None = None, eval_fn=None) -> TrainState:
    """Run the optimization loop; returns the final state.

    The dataset is normalized in place of use (stats from all given fields
    unless already computed); pass the training split only.
    """
    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    if dataset.mean is None:
        dataset.compute_stats()
    normalized = dataset.normalized()
    fields = normalized.as_array()
    extents = normalized.extents
    n_fields = len(fields)

    sched = D.make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    sched_text = {
        "train.diffusion_steps": str(cfg.diffusion_steps),
        "train.beta_start": repr(cfg.beta_start),
        "train.beta_end": repr(cfg.beta_end),
    }

    with open(os.path.join(out_dir, "config.txt"), "w") as fh:
        fh.write(model.cfg.to_text() + "\n")
        fh.write(cfg.to_text() + "\n")

    state = resume_state or TrainState(rng=np.random.default_rng(cfg.seed))
    rng = state.rng

    metrics_path = os.path.join(out_dir, "metrics.csv")
    eval_keys = []
    with open(metrics_path, "w") as metrics_fh:
        metrics_fh.write("step,loss,lr\n")

        initial_loss = None
        guard_count = 0
        while state.step < cfg.steps:
            lr = cosine_lr(state.step, cfg.steps, cfg.lr_max, cfg.lr_min)
            idx = rng.integers(0, n_fields, size=cfg.batch_size)
            batch = fields[idx]
            plane_sets = []
            for b in range(cfg.batch_size):
                picks = cfg.policy.draw(rng, extents)
                plane_sets.append([extract_axis_slice(batch[b], a, i) for a, i in picks])

            model.zero_grads()
            with Tape() as tape:
                loss = D.training_loss(model, batch, plane_sets, sched, rng)
                tape.backward(loss)
            if cfg.clip_norm:
                clip_gradients(model.params, cfg.clip_norm)
            adamw_step(model.params, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                       cfg.weight_decay)

            loss_value = float(loss.data)
            state.losses.append(loss_value)
            metrics_fh.write(f"{state.step},{loss_value!r},{lr!r}\n")

            if initial_loss is None:
                initial_loss = loss_value
            if loss_value > cfg.guard_factor * initial_loss:
                guard_count += 1
                if guard_count >= cfg.guard_patience:
                    raise DivergenceError(
                        f"loss {loss_value:.3e} above {cfg.guard_factor:.0f}x initial "
                        f"{initial_loss:.3e} for {guard_count} consecutive steps"
                    )
            else:
                guard_count = 0

            if cfg.ckpt_interval and state.step % cfg.ckpt_interval == 0:
                if eval_fn is not None:
                    scores = eval_fn(model)
                    state.best_metric = min(state.best_metric, *scores.values())
                    eval_keys = sorted(scores)
                    metrics_fh.write(f"# eval step={state.step} " +
                                     " ".join(f"{k}={scores[k]:.6f}" for k in eval_keys) + "\n")
                save_train_checkpoint(os.path.join(ckpt_dir, f"ckpt_{state.step}"), model, state,
                                      sched_text)

            if (cfg.loss_target is not None and len(state.losses) >= cfg.loss_window
                    and smoothed(state.losses, cfg.loss_window) < cfg.loss_target):
                break

    save_train_checkpoint(os.path.join(ckpt_dir, f"ckpt_{state.step}"), model, state,
                          sched_text)
    return state
