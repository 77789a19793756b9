"""Synthetic divergence-free 3D flow fields, dataset persistence, raw import.

All generators sample the periodic unit cube at x_j = j/d (d points per
axis) with wavenumber 2*pi, so the classical closed forms are exactly
solenoidal on the grid. Dataset files use the fixed little-endian layout
documented in ``write_dataset``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAGIC = b"VXFD"
VERSION = 1
TWO_PI = 2.0 * np.pi


class DatasetFormatError(IOError):
    """Dataset file magic/version/length does not match the format."""


@dataclass
class VoxelField:
    """A (dx, dy, dz, c) float32 grid of flow quantities plus provenance."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"expected (dx, dy, dz, c) data, got shape {self.data.shape}")
        if min(self.data.shape[:3]) < 4:
            raise ValueError(f"extents must be >= 4, got {self.data.shape[:3]}")
        if not np.isfinite(self.data).all():
            raise ValueError("field contains non-finite values")

    @property
    def extents(self):
        return self.data.shape[:3]

    @property
    def channels(self):
        return self.data.shape[3]

    @property
    def time_index(self) -> int:
        return int(self.meta.get("time_index", 0))


@dataclass
class FlowDataset:
    """Ordered fields sharing one grid, plus per-channel train-split stats."""

    fields: list[VoxelField]
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if not self.fields:
            raise ValueError("dataset needs at least one field")
        shape = self.fields[0].data.shape
        for f in self.fields:
            if f.data.shape != shape:
                raise ValueError("all fields must share extents and channel count")

    def __len__(self):
        return len(self.fields)

    @property
    def extents(self):
        return self.fields[0].extents

    @property
    def channels(self):
        return self.fields[0].channels

    def as_array(self) -> np.ndarray:
        return np.stack([f.data for f in self.fields])

    def compute_stats(self, indices: Sequence[int] | None = None) -> "FlowDataset":
        """Set per-channel mean/std from the given (training) subset."""
        idx = list(indices) if indices is not None else range(len(self.fields))
        stacked = np.stack([self.fields[i].data for i in idx]).astype(np.float64)
        self.mean = stacked.mean(axis=(0, 1, 2, 3)).astype(np.float32)
        std = stacked.std(axis=(0, 1, 2, 3))
        std[std == 0] = 1.0  # constant channels are shifted, not rescaled
        self.std = std.astype(np.float32)
        return self

    def normalized(self) -> "FlowDataset":
        """Z-scored copy using the stored stats."""
        if self.mean is None or self.std is None:
            raise ValueError("call compute_stats before normalized")
        fields = [
            VoxelField((f.data - self.mean) / self.std, dict(f.meta)) for f in self.fields
        ]
        return FlowDataset(fields, self.mean.copy(), self.std.copy())

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        return data * self.std + self.mean


def split_interpolation(n: int, train_frac: float, seed: int) -> tuple[list[int], list[int]]:
    """Shuffled time-step split (INT protocol)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cut = int(round(train_frac * n))
    return sorted(order[:cut].tolist()), sorted(order[cut:].tolist())


def split_extrapolation(n: int, train_frac: float) -> tuple[list[int], list[int]]:
    """Strict-prefix time split (EXT protocol): first fraction trains."""
    cut = int(round(train_frac * n))
    return list(range(cut)), list(range(cut, n))


# ---------------------------------------------------------------------------
# generators


def _grid(extents):
    axes = [np.arange(d) / d for d in extents]
    return np.meshgrid(*axes, indexing="ij")


def taylor_green(extents, t: float = 0.0, viscosity: float = 0.01,
                 phase=(0.0, 0.0, 0.0)) -> VoxelField:
    """Decaying Taylor--Green vortex: unit amplitude at t=0, decay e^{-2 nu k^2 t}.

    ``phase`` translates the periodic vortex lattice; any translate is still
    an exact solenoidal Taylor--Green field.
    """
    x, y, z = _grid(extents)
    x = x + phase[0]
    y = y + phase[1]
    z = z + phase[2]
    decay = np.exp(-2.0 * viscosity * TWO_PI ** 2 * t)
    u = np.sin(TWO_PI * x) * np.cos(TWO_PI * y) * np.cos(TWO_PI * z) * decay
    v = -np.cos(TWO_PI * x) * np.sin(TWO_PI * y) * np.cos(TWO_PI * z) * decay
    w = np.zeros_like(u)
    data = np.stack([u, v, w], axis=-1)
    return VoxelField(data, {"generator": "taylor-green", "t": t, "viscosity": viscosity,
                             "phase": tuple(phase), "time_index": 0})


def abc_flow(extents, a: float = 1.0, b: float = 1.0, c: float = 1.0) -> VoxelField:
    """Arnold--Beltrami--Childress flow; exact Beltrami field on the periodic cube."""
    x, y, z = _grid(extents)
    u = a * np.sin(TWO_PI * z) + c * np.cos(TWO_PI * y)
    v = b * np.sin(TWO_PI * x) + a * np.cos(TWO_PI * z)
    w = c * np.sin(TWO_PI * y) + b * np.cos(TWO_PI * x)
    data = np.stack([u, v, w], axis=-1)
    return VoxelField(data, {"generator": "abc", "a": a, "b": b, "c": c, "time_index": 0})


def random_solenoidal(extents, seed: int, spectrum_decay: float = 3.0,
                      max_mode: int | None = None) -> VoxelField:
    """Curl of a random band-limited vector potential, unit RMS.

    The curl uses the central-difference wavenumber s_j = d*sin(2*pi*m/d), so
    the sampled field is divergence-free under the discrete operator itself,
    not just in the continuum limit.
    """
    if spectrum_decay <= 0:
        raise ValueError("spectrum_decay must be positive")
    dx, dy, dz = extents
    if max_mode is None:
        max_mode = max(2, min(extents) // 4)
    rng = np.random.default_rng(seed)

    mx = np.fft.fftfreq(dx) * dx
    my = np.fft.fftfreq(dy) * dy
    mz = np.fft.rfftfreq(dz) * dz
    gx, gy, gz = np.meshgrid(mx, my, mz, indexing="ij")
    mag2 = gx ** 2 + gy ** 2 + gz ** 2
    amp = np.power(1.0 + mag2, -spectrum_decay / 2.0)
    amp[(np.abs(gx) > max_mode) | (np.abs(gy) > max_mode) | (np.abs(gz) > max_mode)] = 0.0

    shape = gx.shape
    psi = [
        (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * amp
        for _ in range(3)
    ]
    # discrete spectral wavenumbers of the 2nd-order central difference
    sx = dx * np.sin(TWO_PI * gx / dx)
    sy = dy * np.sin(TWO_PI * gy / dy)
    sz = dz * np.sin(TWO_PI * gz / dz)
    u_hat = 1j * (sy * psi[2] - sz * psi[1])
    v_hat = 1j * (sz * psi[0] - sx * psi[2])
    w_hat = 1j * (sx * psi[1] - sy * psi[0])
    comps = [np.fft.irfftn(h, s=extents, axes=(0, 1, 2)) for h in (u_hat, v_hat, w_hat)]
    data = np.stack(comps, axis=-1)
    rms = float(np.sqrt(np.mean(data ** 2)))
    if rms > 0:
        data = data / rms
    return VoxelField(data, {"generator": "random-solenoidal", "seed": seed,
                             "spectrum_decay": spectrum_decay, "max_mode": max_mode,
                             "time_index": 0})


def taylor_green_series(extents, count: int, dt: float = 0.07,
                        viscosity: float = 0.01) -> FlowDataset:
    """Taylor--Green snapshots at stride-dt times; a temporal-coherence analogue."""
    fields = []
    for i in range(count):
        f = taylor_green(extents, t=i * dt, viscosity=viscosity)
        f.meta["time_index"] = i
        fields.append(f)
    return FlowDataset(fields)


def random_solenoidal_set(extents, count: int, seed: int,
                          spectrum_decay: float = 3.0) -> FlowDataset:
    fields = []
    for i in range(count):
        f = random_solenoidal(extents, seed=seed + i, spectrum_decay=spectrum_decay)
        f.meta["time_index"] = i
        fields.append(f)
    return FlowDataset(fields)


def abc_flow_set(extents, count: int, seed: int) -> FlowDataset:
    rng = np.random.default_rng(seed)
    fields = []
    for i in range(count):
        a, b, c = rng.uniform(0.3, 1.0, size=3)
        f = abc_flow(extents, a, b, c)
        f.meta["time_index"] = i
        fields.append(f)
    return FlowDataset(fields)


def divergence_audit(ds: FlowDataset) -> float:
    """Max |div u| over all fields under periodic 2nd-order central differences."""
    worst = 0.0
    for f in ds.fields:
        div = np.zeros(f.extents, dtype=np.float64)
        for axis in range(3):
            d = f.extents[axis]
            u = f.data[..., axis].astype(np.float64)
            div += (np.roll(u, -1, axis=axis) - np.roll(u, 1, axis=axis)) * (d / 2.0)
        worst = max(worst, float(np.abs(div).max()))
    return worst


# ---------------------------------------------------------------------------
# persistence
#
# layout (all little-endian):
#   magic "VXFD" | u32 version | u32 n_fields | u32 dx, dy, dz, c
#   per field: u64 time_index | f32 data, row-major, x slowest
#   trailer: f32 mean[c] | f32 std[c]


def dataset_file_size(n_fields: int, extents, channels: int) -> int:
    voxels = extents[0] * extents[1] * extents[2] * channels
    return 28 + n_fields * (8 + 4 * voxels) + 8 * channels


def write_dataset(ds: FlowDataset, path):
    if ds.mean is None or ds.std is None:
        ds.compute_stats()
    dx, dy, dz = ds.extents
    c = ds.channels
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIII", VERSION, len(ds.fields), dx, dy, dz, c))
        for f in ds.fields:
            fh.write(struct.pack("<Q", f.time_index))
            fh.write(np.ascontiguousarray(f.data, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(ds.std, dtype="<f4").tobytes())


def read_dataset(path) -> FlowDataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, n_fields, dx, dy, dz, c = struct.unpack("<IIIIII", fh.read(24))
        if version != VERSION:
            raise DatasetFormatError(f"unsupported dataset version {version}")
        voxels = dx * dy * dz * c
        fields = []
        for _ in range(n_fields):
            head = fh.read(8)
            if len(head) != 8:
                raise DatasetFormatError("truncated field record header")
            (time_index,) = struct.unpack("<Q", head)
            buf = fh.read(4 * voxels)
            if len(buf) != 4 * voxels:
                raise DatasetFormatError("truncated field record payload")
            data = np.frombuffer(buf, dtype="<f4").reshape(dx, dy, dz, c).copy()
            fields.append(VoxelField(data, {"time_index": int(time_index)}))
        tail = fh.read(8 * c)
        if len(tail) != 8 * c:
            raise DatasetFormatError("truncated normalization trailer")
        stats = np.frombuffer(tail, dtype="<f4")
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after dataset payload")
    return FlowDataset(fields, stats[:c].copy(), stats[c:].copy())


def export_raw(ds: FlowDataset, path, dtype="float32", order="C"):
    """Dump bare field data for interchange; inverse of import_raw."""
    arr = ds.as_array().astype(dtype)
    if order == "F":
        arr = np.asfortranarray(arr)
        arr.T.tofile(path)
    else:
        arr.tofile(path)


def import_raw(path, extents, channels: int, dtype="float32", order="C") -> FlowDataset:
    """Ingest externally produced raw arrays (e.g. DNS exports).

    File length must be an exact multiple of one field's byte size; any NaN
    rejects the file with the offending flat index.
    """
    dx, dy, dz = extents
    item = np.dtype(dtype).itemsize
    per_field = dx * dy * dz * channels
    raw = np.fromfile(path, dtype=dtype)
    if raw.size == 0 or raw.size % per_field != 0:
        raise DatasetFormatError(
            f"file length {raw.size * item} bytes is not a multiple of one "
            f"{dx}x{dy}x{dz}x{channels} {dtype} field ({per_field * item} bytes)"
        )
    n_fields = raw.size // per_field
    bad = np.flatnonzero(~np.isfinite(raw))
    if bad.size:
        raise ValueError(f"non-finite value at flat index {int(bad[0])}")
    fields = []
    for i in range(n_fields):
        chunk = raw[i * per_field:(i + 1) * per_field]
        if order == "F":
            data = chunk.reshape((channels, dz, dy, dx)).T
        else:
            data = chunk.reshape(dx, dy, dz, channels)
        fields.append(VoxelField(np.ascontiguousarray(data, dtype=np.float32),
                                 {"time_index": i, "source": str(path)}))
    return FlowDataset(fields).compute_stats()
