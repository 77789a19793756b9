"""Reconstruction quality metrics: nRMSE, PSNR, windowed SSIM, plane profiles.

All accumulation happens in float64 so results are independent of traversal
order. SSIM follows the fixed-constant convention (C1=0.01, C2=0.03) over
uniform 11-per-axis local windows; metrics are computed per channel, then
averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PSNR_INF = math.inf


class MetricError(ValueError):
    """Metric undefined for these inputs (e.g. zero-norm reference)."""


@dataclass
class PlaneMetrics:
    relative_position: int
    nrmse: float
    psnr: float
    ssim: float


@dataclass
class MetricReport:
    nrmse: float
    psnr: float
    ssim: float
    per_plane: dict[str, list[PlaneMetrics]] = field(default_factory=dict)

    def lines(self) -> list[str]:
        psnr = "inf" if math.isinf(self.psnr) else f"{self.psnr:.4f}"
        return [
            f"nrmse: {self.nrmse:.6f}",
            f"psnr_db: {psnr}",
            f"ssim: {self.ssim:.6f}",
        ]


def _check_shapes(pred, true):
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if pred.shape != true.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {true.shape}")
    return pred, true


def nrmse(pred, true) -> float:
    """L2 error normalized by the reference L2 norm."""
    pred, true = _check_shapes(pred, true)
    ref = float(np.sqrt(np.sum(true * true)))
    if ref == 0.0:
        raise MetricError("reference field has zero norm; nRMSE undefined")
    return float(np.sqrt(np.sum((pred - true) ** 2)) / ref)


def psnr(pred, true) -> float:
    """10*log10(MAX^2/MSE) with MAX the reference's peak magnitude; inf at MSE=0."""
    pred, true = _check_shapes(pred, true)
    mse = float(np.mean((pred - true) ** 2))
    if mse == 0.0:
        return PSNR_INF
    peak = float(np.max(np.abs(true)))
    return 10.0 * math.log10(peak * peak / mse)


def _box_sum(x: np.ndarray, window: int, axes) -> np.ndarray:
    """Valid-mode sliding-window sums via cumulative sums along each axis."""
    out = x
    for ax in axes:
        cs = np.cumsum(out, axis=ax)
        zero_shape = list(cs.shape)
        zero_shape[ax] = 1
        cs = np.concatenate([np.zeros(zero_shape, dtype=cs.dtype), cs], axis=ax)
        upper = [slice(None)] * cs.ndim
        lower = [slice(None)] * cs.ndim
        upper[ax] = slice(window, None)
        lower[ax] = slice(None, -window)
        out = cs[tuple(upper)] - cs[tuple(lower)]
    return out


def _gaussian_means(x, window, axes, sigma=1.5):
    from scipy.ndimage import correlate1d

    offsets = np.arange(window) - (window - 1) / 2.0
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    kernel /= kernel.sum()
    out = x
    for ax in axes:
        out = correlate1d(out, kernel, axis=ax, mode="constant")
    margin = window // 2
    sel = [slice(None)] * out.ndim
    for ax in axes:
        sel[ax] = slice(margin, out.shape[ax] - margin)
    return out[tuple(sel)]


def _ssim_single_channel(a, b, window, c1, c2, gaussian):
    for ax in range(a.ndim):
        if a.shape[ax] < window:
            raise MetricError(f"extent {a.shape[ax]} smaller than SSIM window {window}")
    axes = tuple(range(a.ndim))
    if gaussian:
        mean = lambda v: _gaussian_means(v, window, axes)
    else:
        n = float(window ** a.ndim)
        mean = lambda v: _box_sum(v, window, axes) / n
    mu_a = mean(a)
    mu_b = mean(b)
    e_aa = mean(a * a)
    e_bb = mean(b * b)
    e_ab = mean(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim3d(pred, true, window: int = 11, c1: float = 0.01, c2: float = 0.03,
           gaussian: bool = False) -> float:
    """Mean SSIM over sliding window^3 blocks, per channel then averaged."""
    pred, true = _check_shapes(pred, true)
    if pred.ndim == 3:
        pred = pred[..., None]
        true = true[..., None]
    vals = [
        _ssim_single_channel(pred[..., ch], true[..., ch], window, c1, c2, gaussian)
        for ch in range(pred.shape[-1])
    ]
    return float(np.mean(vals))


def ssim2d(pred, true, window: int = 11, c1: float = 0.01, c2: float = 0.03,
           gaussian: bool = False) -> float:
    """2D counterpart used for per-plane slice metrics."""
    pred, true = _check_shapes(pred, true)
    if pred.ndim == 2:
        pred = pred[..., None]
        true = true[..., None]
    vals = [
        _ssim_single_channel(pred[..., ch], true[..., ch], window, c1, c2, gaussian)
        for ch in range(pred.shape[-1])
    ]
    return float(np.mean(vals))


def per_plane_profile(pred, true, axis: int, window: int = 11) -> list[PlaneMetrics]:
    """Slice-by-slice metrics along an axis; position is relative to center.

    A zero-norm reference slice yields nRMSE nan rather than an error so a
    profile over a field with dead planes stays usable.
    """
    pred, true = _check_shapes(pred, true)
    extent = pred.shape[axis]
    center = extent // 2
    rows = []
    for idx in range(extent):
        p = np.take(pred, idx, axis=axis)
        t = np.take(true, idx, axis=axis)
        try:
            e = nrmse(p, t)
        except MetricError:
            e = float("nan")
        rows.append(PlaneMetrics(idx - center, e, psnr(p, t), ssim2d(p, t, window=window)))
    return rows


def evaluate(pred, true, window: int = 11, profiles: bool = True) -> MetricReport:
    report = MetricReport(nrmse(pred, true), psnr(pred, true), ssim3d(pred, true, window=window))
    if profiles:
        for axis, name in enumerate("xyz"):
            report.per_plane[name] = per_plane_profile(pred, true, axis, window=window)
    return report


def profile_csv_lines(report: MetricReport) -> list[str]:
    lines = ["axis,relative_position,nrmse,psnr_db,ssim"]
    for name, rows in report.per_plane.items():
        for r in rows:
            psnr_s = "inf" if math.isinf(r.psnr) else f"{r.psnr:.6f}"
            lines.append(f"{name},{r.relative_position},{r.nrmse:.6f},{psnr_s},{r.ssim:.6f}")
    return lines
