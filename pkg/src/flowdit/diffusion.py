"""DDPM machinery: schedule, closed-form forward noising, the simplified
noise-matching loss, and ancestral sampling conditioned on plane slices."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .planes import PlaneSlice, build_plane_embedding, pad_slices_to_volume

log = logging.getLogger(__name__)


@dataclass
class DiffusionSchedule:
    """Per-step noise levels: beta, alpha = 1 - beta, and their running product."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)


def make_schedule(steps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule; alpha_bar computed as a running product."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas, alphas, np.cumprod(alphas))


def q_sample(s0: np.ndarray, t, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward noising: sqrt(abar_t)*S0 + sqrt(1-abar_t)*eps.

    ``t`` may be a scalar or a per-batch-item vector when ``s0`` is batched.
    """
    s0 = np.asarray(s0)
    eps = np.asarray(eps)
    if eps.shape != s0.shape:
        raise ValueError(f"noise shape {eps.shape} != field shape {s0.shape}")
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 0) or np.any(t_arr >= sched.steps):
        raise IndexError(f"timestep out of range [0, {sched.steps})")
    abar = sched.alpha_bars[t_arr]
    if np.isscalar(t) or np.asarray(t).ndim == 0:
        a = float(abar[0])
        return (np.sqrt(a) * s0 + np.sqrt(1.0 - a) * eps).astype(s0.dtype)
    shape = (len(t_arr),) + (1,) * (s0.ndim - 1)
    a = abar.reshape(shape)
    return (np.sqrt(a) * s0 + np.sqrt(1.0 - a) * eps).astype(s0.dtype)


def build_condition_inputs(cfg, plane_sets: Sequence[Sequence[PlaneSlice]], dtype=np.float32):
    """Stack per-sample conditioning: padded volumes, slice stacks, embeddings.

    Every sample in a batch must carry the same number of planes (the plane
    policy guarantees this); an empty batch of planes yields unconditional
    inputs: zero volumes, no slice stack, zero plane embedding.
    """
    batch = len(plane_sets)
    counts = {len(p) for p in plane_sets}
    if len(counts) > 1:
        raise ValueError(f"every sample needs the same plane count, got {sorted(counts)}")
    n = counts.pop() if counts else 0

    volumes = np.zeros((batch,) + cfg.extents + (cfg.channels,), dtype=dtype)
    masks = np.zeros((batch,) + cfg.extents + (1,), dtype=dtype)
    e_p = np.zeros((batch, cfg.ep_width), dtype=dtype)
    stack = None
    if n > 0:
        stacks = []
        for i, slices in enumerate(plane_sets):
            vol, mask = pad_slices_to_volume(slices, cfg.extents, cfg.channels, dtype=dtype)
            volumes[i] = vol
            masks[i] = mask
            e_p[i] = build_plane_embedding([s.spec for s in slices], cfg.d_pe, cfg.max_planes)
            stacks.append(np.stack([s.samples for s in slices]))
        stack = np.stack(stacks).astype(dtype)
    return volumes, masks, stack, e_p


def model_input(cfg, noisy: np.ndarray, volumes: np.ndarray, masks: np.ndarray) -> np.ndarray:
    parts = [noisy, volumes]
    if cfg.mask_channel:
        parts.append(masks)
    return np.concatenate(parts, axis=-1)


def training_loss(model, s0_batch: np.ndarray, plane_sets: Sequence[Sequence[PlaneSlice]],
                  sched: DiffusionSchedule, rng: np.random.Generator) -> Tensor:
    """Noise-matching MSE on one batch; call inside a Tape to get gradients.

    Samples t uniformly per item, draws the injected noise, assembles the
    conditioning streams from the given slices (cut from the same clean
    fields), and returns mean((eps_hat - eps)^2).
    """
    cfg = model.cfg
    s0 = np.asarray(s0_batch, dtype=model.dtype.type)
    batch = s0.shape[0]
    if len(plane_sets) != batch:
        raise ValueError("one plane set per batch item required")
    t = rng.integers(0, sched.steps, size=batch)
    eps = rng.standard_normal(s0.shape).astype(s0.dtype)
    noisy = q_sample(s0, t, eps, sched)
    volumes, masks, stack, e_p = build_condition_inputs(cfg, plane_sets, dtype=s0.dtype)
    s_in = model_input(cfg, noisy, volumes, masks)
    eps_hat = model.forward(s_in, t, stack, e_p)
    diff = T.sub(eps_hat, Tensor(eps))
    return T.mean(T.mul(diff, diff))


def sampling_stride(total_steps: int, steps: int) -> np.ndarray:
    """Evenly spaced sub-schedule (ascending), always containing the chain's
    top step; steps=1 degenerates to a single jump from t = T-1."""
    if steps < 1 or steps > total_steps:
        raise ValueError(f"steps must be in [1, {total_steps}]")
    taus = np.unique(np.round(np.linspace(total_steps - 1, 0, steps)).astype(np.int64))
    return taus


def ddpm_sample(model, slices: Sequence[PlaneSlice], sched: DiffusionSchedule,
                seed: int = 0, steps: int | None = None,
                progress: bool = False) -> np.ndarray:
    """Ancestral sampling conditioned on the given slices (may be empty).

    Runs the reverse chain over an evenly strided sub-schedule; the posterior
    variance is the standard (1-abar_prev)/(1-abar_t)*beta_eff, with no noise
    added at the final step. Deterministic given the seed.
    """
    cfg = model.cfg
    rng = np.random.default_rng(seed)
    steps = steps if steps is not None else sched.steps
    taus = sampling_stride(sched.steps, steps)

    volumes, masks, stack, e_p = build_condition_inputs(cfg, [list(slices)])
    x = rng.standard_normal((1,) + cfg.extents + (cfg.channels,)).astype(np.float32)

    start = time.perf_counter()
    for i in range(len(taus) - 1, -1, -1):
        tau = int(taus[i])
        abar_t = sched.alpha_bars[tau]
        abar_prev = sched.alpha_bars[int(taus[i - 1])] if i > 0 else 1.0
        beta_eff = 1.0 - abar_t / abar_prev
        alpha_eff = abar_t / abar_prev

        s_in = model_input(cfg, x, volumes, masks)
        eps_hat = model.forward(s_in, np.array([tau]), stack, e_p).data
        mean = (x - beta_eff / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(alpha_eff)
        if i > 0:
            var = (1.0 - abar_prev) / (1.0 - abar_t) * beta_eff
            noise = rng.standard_normal(x.shape).astype(np.float32)
            x = (mean + np.sqrt(var) * noise).astype(np.float32)
        else:
            x = mean.astype(np.float32)
        if progress:
            elapsed_ms = (time.perf_counter() - start) * 1e3
            log.info("sample step=%d t=%d elapsed_ms=%.1f", len(taus) - i, tau, elapsed_ms)
    return x[0]
