"""Optimizer arithmetic, schedule, plane policy, and deterministic training."""

import math

import numpy as np
import pytest

from flowdit import model as Mo
from flowdit import trainer as Tr
from flowdit.flowgen import random_solenoidal_set
from flowdit.tensor import Tensor

TINY = Mo.ModelConfig(layers=2, hidden=16, heads=2, patch=(2, 2, 2), extents=(4, 4, 4),
                      channels=3, d_pe=4, max_planes=2, t_embed_dim=16, enc_patch=2)


# ---------------------------------------------------------------------------
# adamw


def test_adamw_zero_grad_no_decay_unchanged():
    p = Tensor(np.array([1.5, -2.0], dtype=np.float32), requires_grad=True)
    p.grad = np.zeros(2, dtype=np.float32)
    state = Tr.TrainState(rng=np.random.default_rng(0))
    Tr.adamw_step({"p": p}, state, lr=1e-3, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.5, -2.0])


def test_adamw_single_scalar_hand_computed():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([0.5])
    state = Tr.TrainState(rng=np.random.default_rng(0))
    Tr.adamw_step({"p": p}, state, lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=0.0)
    m = (1 - b1) * 0.5
    v = (1 - b2) * 0.25
    m_hat = m / (1 - b1)
    v_hat = v / (1 - b2)
    expected = 1.0 - lr * m_hat / (math.sqrt(v_hat) + eps)
    assert abs(float(p.data[0]) - expected) < 1e-12


def test_adamw_decoupled_decay_shrinks_weights():
    p = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    p.grad = np.zeros(1, dtype=np.float32)
    state = Tr.TrainState(rng=np.random.default_rng(0))
    Tr.adamw_step({"p": p}, state, lr=0.1, weight_decay=0.5)
    assert float(p.data[0]) == pytest.approx(2.0 * (1 - 0.1 * 0.5), rel=1e-6)


def test_adamw_nan_gradient_aborts_with_name():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    p.grad = np.array([np.nan], dtype=np.float32)
    state = Tr.TrainState(rng=np.random.default_rng(0))
    with pytest.raises(Tr.NanGradientError) as exc:
        Tr.adamw_step({"bad.weight": p}, state, lr=0.1)
    assert "bad.weight" in str(exc.value)


def test_clip_gradients_scales_to_max_norm():
    a = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    b = Tensor(np.array([4.0], dtype=np.float32), requires_grad=True)
    a.grad = np.array([3.0], dtype=np.float32)
    b.grad = np.array([4.0], dtype=np.float32)
    norm = Tr.clip_gradients({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    clipped = math.sqrt(float(a.grad[0]) ** 2 + float(b.grad[0]) ** 2)
    assert clipped == pytest.approx(1.0, rel=1e-6)


# ---------------------------------------------------------------------------
# cosine lr


def test_cosine_lr_endpoints_and_midpoint():
    assert Tr.cosine_lr(0, 100) == pytest.approx(1e-4)
    assert Tr.cosine_lr(100, 100, lr_min=1e-6) == pytest.approx(1e-6)
    assert Tr.cosine_lr(50, 100, lr_max=2.0, lr_min=1.0) == pytest.approx(1.5)


def test_cosine_lr_closed_form_everywhere():
    total = 37
    for step in range(total + 1):
        expected = 0.0 + 0.5 * (3e-4 - 0.0) * (1 + math.cos(math.pi * step / total))
        assert Tr.cosine_lr(step, total, 3e-4, 0.0) == pytest.approx(expected, abs=0)


def test_cosine_lr_range_check():
    with pytest.raises(ValueError):
        Tr.cosine_lr(11, 10)


# ---------------------------------------------------------------------------
# plane policy


def test_policy_fixed_center_default():
    policy = Tr.PlanePolicy()
    picks = policy.draw(np.random.default_rng(0), (16, 16, 16))
    assert picks == [(0, 8), (1, 8)]


def test_policy_random_uniform_frequencies():
    policy = Tr.PlanePolicy(kind="random", n_random=1)
    rng = np.random.default_rng(1)
    n = 10_000
    axes = np.zeros(3)
    indices = np.zeros(8)
    for _ in range(n):
        (axis, idx), = policy.draw(rng, (8, 8, 8))
        axes[axis] += 1
        indices[idx] += 1
    p_axis = 1 / 3
    sigma_axis = math.sqrt(n * p_axis * (1 - p_axis))
    assert np.all(np.abs(axes - n * p_axis) < 3 * sigma_axis)
    p_idx = 1 / 8
    sigma_idx = math.sqrt(n * p_idx * (1 - p_idx))
    assert np.all(np.abs(indices - n * p_idx) < 3 * sigma_idx)


def test_policy_unknown_kind():
    with pytest.raises(ValueError):
        Tr.PlanePolicy(kind="spiral").draw(np.random.default_rng(0), (8, 8, 8))


# ---------------------------------------------------------------------------
# training loop


def _tiny_dataset(seed=0, count=3):
    return random_solenoidal_set((4, 4, 4), count=count, seed=seed)


def _tiny_train_cfg(steps, **kw):
    kw.setdefault("batch_size", 2)
    kw.setdefault("diffusion_steps", 20)
    kw.setdefault("seed", 5)
    return Tr.TrainConfig(steps=steps, **kw)


def test_train_deterministic_given_seed(tmp_path):
    losses = []
    for run in range(2):
        model = Mo.FlowDiT(TINY, seed=1)
        state = Tr.train(model, _tiny_dataset(), _tiny_train_cfg(6), tmp_path / f"run{run}")
        losses.append(state.losses)
    assert losses[0] == losses[1]


def test_train_run_directory_layout(tmp_path):
    model = Mo.FlowDiT(TINY, seed=1)
    out = tmp_path / "run"
    Tr.train(model, _tiny_dataset(), _tiny_train_cfg(4), out)
    config = (out / "config.txt").read_text()
    assert "cfg.hidden=16" in config and "train.lr_max=" in config and "policy.kind=" in config
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert rows[0] == "step,loss,lr"
    assert len(rows) == 5
    assert (out / "checkpoints" / "ckpt_4").exists()


def test_checkpoint_resume_matches_uninterrupted_bitwise(tmp_path):
    # the interrupted run must share the full run's TrainConfig (the cosine
    # schedule depends on total steps); it checkpoints at step 3 and the
    # resumed run must replay steps 4-6 bit for bit
    full_model = Mo.FlowDiT(TINY, seed=2)
    full_state = Tr.train(full_model, _tiny_dataset(1), _tiny_train_cfg(6), tmp_path / "full")

    part_model = Mo.FlowDiT(TINY, seed=2)
    Tr.train(part_model, _tiny_dataset(1), _tiny_train_cfg(6, ckpt_interval=3),
             tmp_path / "part")
    resumed_model, resumed_state = Tr.load_train_checkpoint(
        tmp_path / "part" / "checkpoints" / "ckpt_3")
    final_state = Tr.train(resumed_model, _tiny_dataset(1), _tiny_train_cfg(6),
                           tmp_path / "resumed", resume_state=resumed_state)

    assert final_state.losses == full_state.losses[3:]
    for name, t in full_model.params.items():
        np.testing.assert_array_equal(resumed_model.params[name].data, t.data)


def test_train_loss_decreases_on_overfit_smoke(tmp_path):
    model = Mo.FlowDiT(TINY, seed=3)
    cfg = _tiny_train_cfg(80, lr_max=2e-3, loss_window=10)
    state = Tr.train(model, _tiny_dataset(2, count=2), cfg, tmp_path / "overfit")
    first = np.mean(state.losses[:10])
    last = np.mean(state.losses[-10:])
    assert last < first


def test_train_early_stop_on_loss_target(tmp_path):
    model = Mo.FlowDiT(TINY, seed=4)
    cfg = _tiny_train_cfg(500, lr_max=2e-3, loss_target=10.0, loss_window=5)
    state = Tr.train(model, _tiny_dataset(3), cfg, tmp_path / "early")
    assert state.step < 500  # any loss is below 10 immediately


def test_divergence_guard_trips(tmp_path):
    model = Mo.FlowDiT(TINY, seed=5)
    cfg = _tiny_train_cfg(50, guard_factor=0.1, guard_patience=3)
    with pytest.raises(Tr.DivergenceError):
        Tr.train(model, _tiny_dataset(4), cfg, tmp_path / "diverge")


def test_smoothed_loss_windows_non_increasing_on_overfit(tmp_path):
    model = Mo.FlowDiT(TINY, seed=6)
    cfg = _tiny_train_cfg(120, lr_max=2e-3)
    state = Tr.train(model, _tiny_dataset(5, count=2), cfg, tmp_path / "mono")
    windows = [np.mean(state.losses[i:i + 40]) for i in range(0, 120, 40)]
    for earlier, later in zip(windows, windows[1:]):
        assert later <= earlier * 1.10  # 10% measurement slack on window means


def test_metrics_csv_lr_column_matches_closed_form(tmp_path):
    model = Mo.FlowDiT(TINY, seed=7)
    cfg = _tiny_train_cfg(8, lr_max=2e-4, lr_min=1e-6)
    Tr.train(model, _tiny_dataset(6), cfg, tmp_path / "lrcheck")
    rows = (tmp_path / "lrcheck" / "metrics.csv").read_text().strip().splitlines()[1:]
    for row in rows:
        step_s, _, lr_s = row.split(",")
        logged_step = int(step_s)  # post-update step; lr used was for step-1
        expected = Tr.cosine_lr(logged_step - 1, 8, 2e-4, 1e-6)
        assert float(lr_s) == pytest.approx(expected, rel=0, abs=0)
