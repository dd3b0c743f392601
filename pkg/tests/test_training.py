import math

import numpy as np
import pytest

from resdyn.autodiff import Tensor, tensor
from resdyn.datagen import (
    ConditionSpec,
    DatasetRecord,
    SinePattern,
    cosim_run,
)
from resdyn.network import DyTRConfig, NormStats, ResidualModel
from resdyn.training import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    compute_stats,
    dataset_loss,
    make_windows,
    train,
    train_windows,
    weighted_loss,
)
from resdyn.vehicle import DynState, VehicleConfig, WheelCommand


# ------------------------------------------------------------ weighted loss

def test_loss_zero_when_residual_exact():
    s_hat = np.array([[1.0, 2.0, 3.0]])
    s_gt = np.array([[1.5, 2.5, 2.0]])
    delta = tensor(s_gt - s_hat)
    loss = weighted_loss(delta, s_hat, s_gt)
    assert float(loss.data) == 0.0


def test_loss_weights_third_state_by_1000():
    e = 0.3
    delta = tensor([[0.0, 0.0, e]])
    zero = np.zeros((1, 3))
    loss = weighted_loss(delta, zero, zero, alphas=(1, 10, 1000), beta=1.0)
    assert float(loss.data) == pytest.approx(1000.0 * 0.5 * e * e, rel=1e-12)


def test_loss_smooth_l1_value():
    delta = tensor([[0.5, 0.0, 0.0]])
    zero = np.zeros((1, 3))
    loss = weighted_loss(delta, zero, zero, alphas=(1, 10, 1000), beta=1.0)
    assert float(loss.data) == pytest.approx(0.125, rel=1e-12)


def test_loss_scale_divides_error():
    delta = tensor([[0.2, 0.0, 0.0]])
    zero = np.zeros((1, 3))
    scaled = weighted_loss(delta, zero, zero, alphas=(1, 1, 1), beta=1.0,
                           scale=np.array([0.1, 1.0, 1.0]))
    # error 0.2 / 0.1 = 2.0 -> linear branch: 2.0 - 0.5
    assert float(scaled.data) == pytest.approx(1.5, rel=1e-12)


def test_loss_batch_mean():
    delta = tensor([[0.5, 0.0, 0.0], [0.0, 0.0, 0.0]])
    zero = np.zeros((2, 3))
    loss = weighted_loss(delta, zero, zero, alphas=(1, 10, 1000))
    assert float(loss.data) == pytest.approx(0.125 / 2.0, rel=1e-12)


def test_loss_nonnegative_property():
    rng = np.random.default_rng(0)
    for _ in range(20):
        delta = tensor(rng.standard_normal((4, 3)))
        s_hat = rng.standard_normal((4, 3))
        s_gt = rng.standard_normal((4, 3))
        assert float(weighted_loss(delta, s_hat, s_gt).data) >= 0.0


# -------------------------------------------------------------------- adam

def one_param(value):
    return {"w": Tensor(np.array(value))}


def test_adam_zero_grad_is_noop():
    params = one_param([1.0, -2.0])
    params["w"].grad = np.zeros(2)
    before = params["w"].data.copy()
    adam_step(params, AdamState(), lr=1e-3, weight_decay=0.0)
    assert np.array_equal(params["w"].data, before)


def test_adam_first_step_magnitude_is_lr():
    params = one_param([0.5])
    params["w"].grad = np.array([1.0])
    adam_step(params, AdamState(), lr=1e-3)
    # bias-corrected first step: lr * 1 / (1 + eps) to first order
    assert params["w"].data[0] == pytest.approx(0.5 - 1e-3, abs=1e-9)


def test_adam_constant_gradient_quadratic_monotone():
    # constant unit gradient: bias corrections cancel, each step moves w by
    # ~lr, so the quadratic loss decreases monotonically while w > 0
    params = one_param([2.0])
    state = AdamState()
    losses = []
    for _ in range(100):
        w = params["w"].data[0]
        losses.append(w * w)
        params["w"].grad = np.array([1.0])
        adam_step(params, state, lr=0.01)
    assert params["w"].data[0] == pytest.approx(1.0, abs=1e-5)
    assert losses[-1] < 0.3 * losses[0]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_true_gradient_quadratic_converges():
    params = one_param([2.0])
    state = AdamState()
    losses = []
    for _ in range(100):
        w = params["w"].data[0]
        losses.append(w * w)
        params["w"].grad = np.array([2.0 * w])
        adam_step(params, state, lr=0.05)
    assert losses[-1] < 1e-2 * losses[0]


def test_adam_decoupled_weight_decay_shrinks():
    params = one_param([1.0])
    params["w"].grad = np.array([0.0])
    adam_step(params, AdamState(), lr=0.1, weight_decay=0.5)
    # zero gradient: only the decoupled shrink applies
    assert params["w"].data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)


def test_adam_shape_mismatch():
    params = one_param([1.0, 2.0])
    params["w"].grad = np.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, AdamState(), lr=1e-3)


# ----------------------------------------------------------------- windows

def fabricate_condition(cond_id, n, mass=2000.0, offset=0.0):
    records = []
    for k in range(n):
        v = offset + float(k)
        records.append(DatasetRecord(
            condition_id=cond_id, step=k, t=0.01 * k,
            u=WheelCommand((v, v, v, v), (0.0, 0.0, 0.0, 0.0)),
            s_hat=DynState(v, 0.0, 0.0), s_gt=DynState(v + 0.5, 0.0, 0.0),
            mass=mass))
    return records


def test_windows_exact_minimum_length():
    data = {("a", 2000.0): fabricate_condition("a", 6)}
    ws = make_windows(data, seq_len=5)
    assert ws.n == 1
    assert np.allclose(ws.hist_states[0, :, 0], [0, 1, 2, 3, 4])
    assert ws.next_estimate[0, 0] == 5.0
    assert ws.target[0, 0] == 5.5


def test_windows_count_n_minus_t():
    data = {("a", 2000.0): fabricate_condition("a", 40)}
    assert make_windows(data, seq_len=15).n == 25


def test_windows_never_cross_conditions():
    data = {("a", 2000.0): fabricate_condition("a", 10, offset=0.0),
            ("b", 2000.0): fabricate_condition("b", 10, offset=100.0)}
    ws = make_windows(data, seq_len=5)
    assert ws.n == 10
    for i in range(ws.n):
        vals = ws.hist_states[i, :, 0]
        # a window is internally consecutive, so it stays inside one condition
        assert np.allclose(np.diff(vals), 1.0)
        assert (vals < 50).all() or (vals >= 100).all()


def test_windows_short_condition_skipped_with_count():
    data = {("a", 2000.0): fabricate_condition("a", 4),
            ("b", 2000.0): fabricate_condition("b", 12)}
    ws = make_windows(data, seq_len=5)
    assert ws.skipped == 1
    assert ws.n == 7


def test_compute_stats_scale_only_residual():
    data = {("a", 2000.0): fabricate_condition("a", 30)}
    ws = make_windows(data, seq_len=5)
    stats = compute_stats(ws)
    # residual is constant 0.5 in v_x -> std ~ 0 -> floored, never shifted
    assert stats.residual_scale[0] == pytest.approx(1e-8)
    assert stats.step_std.shape == (11,)


# ------------------------------------------------------------------- train

def overfit_windows(n=64, seq_len=15):
    cfg = VehicleConfig()
    spec = ConditionSpec(id="fit", duration=(n + seq_len) * 0.01 + 0.005,
                         dt=0.01, initial_state=DynState(9.0, 0.0, 0.0),
                         torque=SinePattern(amplitude=250.0, freq_hz=0.4,
                                            offset=120.0),
                         front_steer=SinePattern(amplitude=0.07, freq_hz=0.3))
    records = cosim_run(spec, cfg.mass, cfg, cfg)
    ws = make_windows({("fit", cfg.mass): records}, seq_len)
    return ws.take(np.arange(n))


def test_overfit_tiny_fixture():
    ws = overfit_windows()
    cfg = DyTRConfig(feature_dim=32, seq_len=15, depth=1, num_heads=4)
    tc = TrainConfig(epochs=200, batch_size=64, lr=1e-3, weight_decay=0.0,
                     seed=0, precision="float64")
    result = train_windows(ws, "dytr", cfg, tc)
    first = result.history[0][1]
    last = result.history[-1][1]
    assert last < 0.01 * first, (first, last)


def test_training_deterministic():
    ws = overfit_windows(n=32)
    cfg = DyTRConfig(feature_dim=16, seq_len=15, depth=1, num_heads=2)
    tc = TrainConfig(epochs=5, batch_size=16, seed=3)
    r1 = train_windows(ws, "dytr", cfg, tc)
    r2 = train_windows(ws, "dytr", cfg, tc)
    # val losses are NaN here (no val set), so compare train losses
    assert [h[:2] for h in r1.history] == [h[:2] for h in r2.history]
    for name in r1.model.params:
        assert np.array_equal(r1.model.params[name].data,
                              r2.model.params[name].data)


def test_lr_zero_keeps_loss_flat():
    ws = overfit_windows(n=32)
    cfg = DyTRConfig(feature_dim=16, seq_len=15, depth=1, num_heads=2)
    # float64 so the only wiggle left is summation order under the shuffle
    tc = TrainConfig(epochs=4, batch_size=32, lr=0.0, weight_decay=0.0,
                     seed=1, precision="float64")
    result = train_windows(ws, "dytr", cfg, tc)
    losses = [h[1] for h in result.history]
    assert (max(losses) - min(losses)) / max(losses) < 1e-12


def test_train_from_disk_with_val(tiny_data_dir):
    cfg = DyTRConfig(feature_dim=16, seq_len=10, depth=1, num_heads=2)
    tc = TrainConfig(epochs=2, batch_size=256, seed=0)
    result = train(tiny_data_dir, "dytr", cfg, tc, val_split="val1")
    assert len(result.history) == 2
    assert all(np.isfinite(h[1]) for h in result.history)
    assert all(np.isfinite(h[2]) for h in result.history)
    assert result.best_epoch >= 0
    # loss history file
    import os
    path = os.path.join(tiny_data_dir, "history.csv")
    result.write_history(path)
    with open(path) as fh:
        lines = fh.read().strip().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss"
    assert len(lines) == 3
    os.remove(path)


def test_train_empty_windows_rejected():
    data = {("a", 2000.0): fabricate_condition("a", 3)}
    ws = make_windows(data, seq_len=5)
    with pytest.raises(ValueError, match="empty"):
        train_windows(ws, "dytr",
                      DyTRConfig(feature_dim=16, seq_len=5, depth=1,
                                 num_heads=2), TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(alphas=(1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        TrainConfig(precision="float16")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 3, "nope": 1})


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported_with_epoch():
    ws = overfit_windows(n=16)
    cfg = DyTRConfig(feature_dim=16, seq_len=15, depth=1, num_heads=2)
    tc = TrainConfig(epochs=3, batch_size=16, lr=1e12, seed=0,
                     precision="float32")
    with pytest.raises(TrainingDiverged):
        train_windows(ws, "dytr", cfg, tc)


def test_alpha_weighting_dominates_wz_numerically():
    # equal normalized errors: the yaw-rate term carries ~99% of the loss
    delta = tensor([[0.1, 0.1, 0.1]])
    zero = np.zeros((1, 3))
    full = float(weighted_loss(delta, zero, zero, alphas=(1, 10, 1000)).data)
    wz_only = float(weighted_loss(tensor([[0.0, 0.0, 0.1]]), zero, zero,
                                  alphas=(1, 10, 1000)).data)
    assert wz_only / full > 0.98
