"""Generators (divergence-free by construction), persistence, raw import."""

import numpy as np
import pytest

from flowdit import flowgen as F
from oracles import central_curl, central_divergence


# ---------------------------------------------------------------------------
# taylor_green


def test_taylor_green_unit_amplitude_at_t0():
    f = F.taylor_green((16, 16, 16), t=0.0)
    assert np.abs(f.data).max() == pytest.approx(1.0, abs=1e-6)


def test_taylor_green_decay_limit():
    nu = 0.05
    early = F.taylor_green((8, 8, 8), t=0.0, viscosity=nu)
    late = F.taylor_green((8, 8, 8), t=50.0, viscosity=nu)
    assert np.abs(late.data).max() < 1e-6
    # decay factor matches e^{-2 nu k^2 t}
    mid = F.taylor_green((8, 8, 8), t=1.0, viscosity=nu)
    factor = np.exp(-2 * nu * (2 * np.pi) ** 2)
    np.testing.assert_allclose(mid.data, early.data * factor, atol=1e-7)


def test_taylor_green_discrete_divergence():
    for d in (8, 16):
        f = F.taylor_green((d, d, d), t=0.3)
        h = 1.0 / d
        assert np.abs(central_divergence(f.data)).max() < 10 * h * h


# ---------------------------------------------------------------------------
# abc_flow


def test_abc_zero_coefficients():
    f = F.abc_flow((8, 8, 8), 0.0, 0.0, 0.0)
    assert not f.data.any()


def test_abc_discrete_divergence():
    f = F.abc_flow((12, 12, 12), 1.0, 0.7, 0.4)
    h = 1.0 / 12
    assert np.abs(central_divergence(f.data)).max() < 10 * h * h


def test_abc_beltrami_property():
    d = 16
    f = F.abc_flow((d, d, d), 1.0, 0.8, 0.6)
    curl = central_curl(f.data)
    u = f.data.astype(np.float64)
    cross = np.cross(curl.reshape(-1, 3), u.reshape(-1, 3))
    scale = np.linalg.norm(curl.reshape(-1, 3), axis=1) * np.linalg.norm(u.reshape(-1, 3), axis=1)
    ok = scale > 1e-8
    misalign = np.linalg.norm(cross[ok], axis=1) / scale[ok]
    assert misalign.max() < (1.0 / d) ** 2 * 10


# ---------------------------------------------------------------------------
# random_solenoidal


def test_random_solenoidal_deterministic():
    a = F.random_solenoidal((8, 8, 8), seed=7)
    b = F.random_solenoidal((8, 8, 8), seed=7)
    np.testing.assert_array_equal(a.data, b.data)
    c = F.random_solenoidal((8, 8, 8), seed=8)
    assert np.abs(a.data - c.data).max() > 1e-3


def test_random_solenoidal_divergence():
    for seed in range(5):
        f = F.random_solenoidal((16, 16, 16), seed=seed)
        h = 1.0 / 16
        assert np.abs(central_divergence(f.data)).max() < 10 * h * h


def test_random_solenoidal_zero_mean():
    f = F.random_solenoidal((16, 16, 16), seed=3)
    means = f.data.mean(axis=(0, 1, 2))
    sigma = f.data.std() / np.sqrt(16 ** 3)
    assert np.all(np.abs(means) < 3 * sigma + 1e-6)


def test_random_solenoidal_bad_decay():
    with pytest.raises(ValueError):
        F.random_solenoidal((8, 8, 8), seed=0, spectrum_decay=0.0)


# ---------------------------------------------------------------------------
# dataset mechanics


def test_dataset_normalization_stats():
    ds = F.random_solenoidal_set((8, 8, 8), count=6, seed=0)
    train_idx, _ = F.split_extrapolation(6, 0.8)
    ds.compute_stats(train_idx)
    normed = ds.normalized()
    stacked = np.stack([normed.fields[i].data for i in train_idx]).astype(np.float64)
    assert np.abs(stacked.mean(axis=(0, 1, 2, 3))).max() < 1e-6
    assert np.abs(stacked.std(axis=(0, 1, 2, 3)) - 1.0).max() < 1e-6


def test_split_protocols():
    train, test = F.split_extrapolation(10, 0.8)
    assert train == list(range(8)) and test == [8, 9]
    train_i, test_i = F.split_interpolation(10, 0.8, seed=1)
    assert sorted(train_i + test_i) == list(range(10))
    assert len(train_i) == 8
    assert train_i != list(range(8))  # shuffled with this seed


def test_mixed_extents_rejected():
    a = F.taylor_green((8, 8, 8))
    b = F.taylor_green((8, 8, 4))
    with pytest.raises(ValueError):
        F.FlowDataset([a, b])


def test_nonfinite_rejected():
    data = np.zeros((4, 4, 4, 1), dtype=np.float32)
    data[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        F.VoxelField(data)


# ---------------------------------------------------------------------------
# persistence


def test_write_read_round_trip_bit_exact(tmp_path):
    ds = F.taylor_green_series((8, 8, 8), count=4)
    ds.compute_stats()
    path = tmp_path / "flow.vxfd"
    F.write_dataset(ds, path)
    back = F.read_dataset(path)
    assert len(back) == 4
    for orig, loaded in zip(ds.fields, back.fields):
        np.testing.assert_array_equal(loaded.data, orig.data)
        assert loaded.time_index == orig.time_index
    np.testing.assert_array_equal(back.mean, ds.mean)
    np.testing.assert_array_equal(back.std, ds.std)


def test_file_size_exact(tmp_path):
    ds = F.random_solenoidal_set((8, 8, 8), count=100, seed=0)
    ds.compute_stats()
    path = tmp_path / "big.vxfd"
    F.write_dataset(ds, path)
    assert path.stat().st_size == F.dataset_file_size(100, (8, 8, 8), 3)
    assert F.dataset_file_size(100, (8, 8, 8), 3) == 28 + 100 * (8 + 4 * 8 * 8 * 8 * 3) + 24


def test_corrupted_magic_rejected(tmp_path):
    ds = F.taylor_green_series((8, 8, 8), count=1)
    path = tmp_path / "bad.vxfd"
    F.write_dataset(ds, path)
    raw = bytearray(path.read_bytes())
    raw[0] = ord("X")
    path.write_bytes(bytes(raw))
    with pytest.raises(F.DatasetFormatError):
        F.read_dataset(path)


def test_truncated_file_rejected(tmp_path):
    ds = F.taylor_green_series((8, 8, 8), count=2)
    path = tmp_path / "trunc.vxfd"
    F.write_dataset(ds, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(F.DatasetFormatError):
        F.read_dataset(path)


# ---------------------------------------------------------------------------
# raw import


def test_import_raw_size_check(tmp_path):
    path = tmp_path / "one_field.raw"
    data = np.arange(4 * 4 * 4 * 3, dtype=np.float32)
    data.tofile(path)
    assert path.stat().st_size == 768
    ds = F.import_raw(path, (4, 4, 4), 3)
    assert len(ds) == 1
    assert ds.fields[0].meta["source"] == str(path)


def test_import_raw_rejects_nan_with_index(tmp_path):
    path = tmp_path / "nan.raw"
    data = np.zeros(4 * 4 * 4 * 3, dtype=np.float32)
    data[17] = np.nan
    data.tofile(path)
    with pytest.raises(ValueError) as exc:
        F.import_raw(path, (4, 4, 4), 3)
    assert "17" in str(exc.value)


def test_import_raw_rejects_bad_length(tmp_path):
    path = tmp_path / "short.raw"
    np.zeros(100, dtype=np.float32).tofile(path)
    with pytest.raises(F.DatasetFormatError):
        F.import_raw(path, (4, 4, 4), 3)


def test_export_import_round_trip(tmp_path):
    ds = F.random_solenoidal_set((4, 4, 4), count=3, seed=5)
    path = tmp_path / "rt.raw"
    F.export_raw(ds, path)
    back = F.import_raw(path, (4, 4, 4), 3)
    np.testing.assert_array_equal(back.as_array(), ds.as_array())
