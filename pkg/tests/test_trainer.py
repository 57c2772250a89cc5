import numpy as np
import pytest

from rkdl.constraint_loss import LossWeights
from rkdl.dataset import TimeSeriesDataset
from rkdl.networks import NetworkSpec, load_checkpoint
from rkdl.trainer import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    read_history_csv,
    train,
    write_history_csv,
)

I_SPEC = NetworkSpec("implicit_sine", 1, 1, 16, 2)
D_SPEC = NetworkSpec("residual_mlp", 1, 1, 8, 1)


def sine_data(m=100):
    t = np.linspace(0, 1, m)
    y = np.sin(2 * np.pi * t)
    return TimeSeriesDataset(t, y, y)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr_implicit=0.0)
    with pytest.raises(ValueError):
        TrainConfig(weight_decay=-1e-4)


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(new["w"], p["w"])


def test_adam_first_step_is_signed_lr():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([3.0, -0.01, 250.0])}
    new, state = adam_step(p, g, AdamState(), lr=1e-3)
    assert np.allclose(new["w"] - p["w"], -1e-3 * np.sign(g["w"]), rtol=1e-5)
    assert state.step == 1


def test_adam_weight_decay_shrinks():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(5):
        new, state = adam_step(p, {"w": np.zeros(2)}, state, lr=1e-2, weight_decay=1e-4)
        assert np.all(np.abs(new["w"]) < np.abs(p["w"]))
        p = new


def test_adam_scale_invariance():
    rng = np.random.default_rng(0)
    p = {"w": rng.normal(size=5)}
    g = rng.normal(size=5)
    base, _ = adam_step(p, {"w": g}, AdamState(), lr=1e-3)
    for c in (10.0, 0.1):
        scaled, _ = adam_step(p, {"w": c * g}, AdamState(), lr=1e-3)
        assert np.allclose(scaled["w"] - p["w"], base["w"] - p["w"], rtol=0, atol=1e-6 * 1e-3)


def test_adam_rejects_bad_gradients():
    with pytest.raises(FloatingPointError, match="w"):
        adam_step({"w": np.ones(2)}, {"w": np.array([1.0, np.nan])}, AdamState(), 1e-3)
    with pytest.raises(ValueError):
        adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState(), 1e-3)


def test_zero_epochs_returns_init_and_single_row():
    res = train(sine_data(), I_SPEC, D_SPEC, TrainConfig(epochs=0))
    assert len(res.history) == 1 and res.history[0]["epoch"] == 0
    again = train(sine_data(), I_SPEC, D_SPEC, TrainConfig(epochs=0))
    assert res.implicit.checksum() == again.implicit.checksum()


def test_clean_sine_smoke_and_monotone_trend():
    cfg = TrainConfig(epochs=2000, weights=LossWeights(0.0, 0.0), log_every=0)
    res = train(sine_data(), I_SPEC, D_SPEC, cfg)
    total = np.array([r["total"] for r in res.history])
    assert len(total) == 2000
    assert total[-1] < 1e-4
    assert total[-1] < 0.01 * total[0]
    assert np.all(np.diff(np.minimum.accumulate(total)) <= 0)


def test_seed_determinism_and_checkpoints(tmp_path):
    cfg = TrainConfig(epochs=30, log_every=10, checkpoint_path=str(tmp_path / "c.rkdl"), seed=4)
    a = train(sine_data(40), I_SPEC, D_SPEC, cfg)
    b = train(sine_data(40), I_SPEC, D_SPEC, TrainConfig(epochs=30, log_every=0, seed=4))
    assert a.history == b.history
    assert a.implicit.checksum() == b.implicit.checksum()
    assert a.dynamics.checksum() == b.dynamics.checksum()
    nets, meta = load_checkpoint(tmp_path / "c.rkdl")
    assert meta["epoch"] == 30
    assert nets["dynamics"].checksum() == a.dynamics.checksum()


def test_divergence_reports_epoch():
    # squared residuals overflow, so the very first loss is already infinite
    cfg = TrainConfig(epochs=5, log_every=0)
    y = 1e200 * np.ones(10)
    ds = TimeSeriesDataset(np.linspace(0, 1, 10), y)
    with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
        train(ds, I_SPEC, D_SPEC, cfg)
    assert info.value.epoch == 1 and info.value.last_finite is None


def test_history_csv_round_trip(tmp_path):
    res = train(sine_data(20), I_SPEC, D_SPEC, TrainConfig(epochs=3, log_every=0))
    write_history_csv(res.history, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,mse,rk,grad,total"
    assert read_history_csv(tmp_path / "h.csv") == res.history
