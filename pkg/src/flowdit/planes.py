"""Plane equations, axis-aligned slicing, 2D-to-3D padding, and the Fourier
plane-position embedding.

Coordinates are normalized to the unit cube: a voxel grid of extent ``d``
along an axis maps index ``i`` to coordinate ``i / (d - 1)``. Plane equations
``a*x + b*y + c*z + d = 0`` are canonicalized to a unit normal whose first
nonzero component is positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

AXIS_NAMES = ("x", "y", "z")


class InvalidPlaneError(ValueError):
    """Plane has a zero normal vector."""


class OutOfCubeError(ValueError):
    """Normalized offset |d| exceeds 1; the plane barely meets the unit cube."""


@dataclass(frozen=True)
class PlaneSpec:
    """Normalized plane coefficients (unit normal, |d| <= 1, canonical sign)."""

    a: float
    b: float
    c: float
    d: float

    def coefficients(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d], dtype=np.float64)

    @staticmethod
    def axis_aligned(axis: int, coord: float) -> "PlaneSpec":
        """Plane normal to ``axis`` at normalized coordinate ``coord`` in [0, 1]."""
        normal = [0.0, 0.0, 0.0]
        normal[axis] = 1.0
        return normalize_plane(normal[0], normal[1], normal[2], -float(coord))


@dataclass
class PlaneSlice:
    """A 2D sample array cut from a voxel field along an axis-aligned plane."""

    spec: PlaneSpec
    samples: np.ndarray  # (d1, d2, c)
    axis: int
    axis_index: int


def normalize_plane(a: float, b: float, c: float, d: float) -> PlaneSpec:
    """Divide by the normal's magnitude and canonicalize the sign.

    Raises InvalidPlaneError for a zero normal and OutOfCubeError when the
    normalized offset falls outside [-1, 1].
    """
    norm = float(np.sqrt(a * a + b * b + c * c))
    if norm == 0.0:
        raise InvalidPlaneError("plane normal (a, b, c) must be nonzero")
    coeffs = np.array([a, b, c, d], dtype=np.float64) / norm
    for value in coeffs[:3]:
        if value != 0.0:
            if value < 0.0:
                coeffs = -coeffs
            break
    if abs(coeffs[3]) > 1.0 + 1e-12:
        raise OutOfCubeError(f"normalized plane offset {coeffs[3]:.6f} outside [-1, 1]")
    return PlaneSpec(float(coeffs[0]), float(coeffs[1]), float(coeffs[2]), float(coeffs[3]))


def extract_axis_slice(field, axis: int, index: int) -> PlaneSlice:
    """Cut the axis-aligned voxel plane at ``index`` from a (dx, dy, dz, c) field."""
    data = np.asarray(field.data if hasattr(field, "data") else field)
    if data.ndim != 4:
        raise ValueError(f"expected a (dx, dy, dz, c) field, got shape {data.shape}")
    extent = data.shape[axis]
    if not 0 <= index < extent:
        raise IndexError(f"slice index {index} out of range for axis extent {extent}")
    samples = np.take(data, index, axis=axis).copy()
    coord = index / (extent - 1) if extent > 1 else 0.0
    return PlaneSlice(PlaneSpec.axis_aligned(axis, coord), samples, axis, index)


def pad_slices_to_volume(slices: Sequence[PlaneSlice], extents, channels: int,
                         dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize axis-aligned slices into a zero volume plus an occupancy mask.

    Returns ``(volume, mask)`` with shapes (dx, dy, dz, channels) and
    (dx, dy, dz, 1). Overlapping planes overwrite in input order; the mask is
    the union of occupied voxels.
    """
    dx, dy, dz = extents
    volume = np.zeros((dx, dy, dz, channels), dtype=dtype)
    mask = np.zeros((dx, dy, dz, 1), dtype=dtype)
    for sl in slices:
        face = tuple(e for i, e in enumerate((dx, dy, dz)) if i != sl.axis)
        if sl.samples.shape[:2] != face or sl.samples.shape[2] != channels:
            raise ValueError(
                f"slice extents {sl.samples.shape} do not match grid face {face} x {channels}"
            )
        sel = [slice(None)] * 3
        sel[sl.axis] = sl.axis_index
        volume[tuple(sel)] = sl.samples
        mask[tuple(sel)] = 1.0
    return volume, mask


def fourier_pe(value: float, d_pe: int) -> np.ndarray:
    """Sinusoidal features of one plane coefficient.

    Pair ``i`` holds sin and cos of ``value / 10000**((2 i / d_pe) - 1)``; the
    shifted exponent scales coefficients (all below 1 in magnitude) up by
    10000 at the lowest index. Output length is ``d_pe``, values in [-1, 1].
    """
    if d_pe < 2 or d_pe % 2 != 0:
        raise ValueError(f"d_pe must be an even integer >= 2, got {d_pe}")
    i = np.arange(d_pe // 2, dtype=np.float64)
    args = value / np.power(10000.0, (2.0 * i / d_pe) - 1.0)
    out = np.empty(d_pe, dtype=np.float64)
    out[0::2] = np.sin(args)
    out[1::2] = np.cos(args)
    return out


def plane_embedding_width(d_pe: int, max_planes: int) -> int:
    return 4 * d_pe * max_planes


def build_plane_embedding(specs: Sequence[PlaneSpec], d_pe: int, max_planes: int) -> np.ndarray:
    """Concatenate per-plane coefficient embeddings, zero-padded to fixed width.

    Each plane contributes a block [PE(a), PE(b), PE(c), PE(d)] of length
    4*d_pe, in caller order. An empty plane list yields the all-zero vector
    (unconditional mode).
    """
    if len(specs) > max_planes:
        raise ValueError(f"{len(specs)} planes exceed the configured maximum {max_planes}")
    out = np.zeros(plane_embedding_width(d_pe, max_planes), dtype=np.float64)
    for p, spec in enumerate(specs):
        block = np.concatenate([fourier_pe(v, d_pe) for v in spec.coefficients()])
        out[p * 4 * d_pe:(p + 1) * 4 * d_pe] = block
    return out
