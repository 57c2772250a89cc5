import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rkdl import autodiff as ad
from rkdl.constraint_loss import LossWeights, loss_grad, loss_mse, loss_rk, total_loss
from rkdl.dataset import (
    NoiseSpec,
    SpatioTemporalDataset,
    TimeSeriesDataset,
    build_transform,
    with_noise,
)
from rkdl.integrators import integrate, rhs_fhn
from rkdl.networks import NetworkSpec, init

I_SPEC = NetworkSpec("implicit_sine", 1, 2, 8, 2)
D_SPEC = NetworkSpec("residual_mlp", 2, 2, 8, 2)


def fhn_dataset(m=16, dt=0.1, seed=0, t0=0.0):
    t = t0 + dt * np.arange(m)
    clean = integrate(rhs_fhn, [2.0, 0.0], t, substeps=20).states
    return with_noise(TimeSeriesDataset(t, clean, clean, ("v", "w")), NoiseSpec(0.1, seed))


def rk4_by_hand(g, x, h):
    k1 = g(x)
    k2 = g(x + 0.5 * h * k1)
    k3 = g(x + 0.5 * h * k2)
    k4 = g(x + h * k3)
    return x + h * (k1 / 6 + k2 / 3 + k3 / 3 + k4 / 6)


def test_loss_mse_cases():
    y = np.random.default_rng(0).normal(size=(5, 2))
    assert float(loss_mse(y, y)) == 0.0
    e = np.zeros((4, 2))
    e[:, 0] = 1.0
    assert float(loss_mse(y[:4] + e, y[:4])) == pytest.approx(1.0)
    x = np.random.default_rng(1).normal(size=(5, 2))
    naive = sum(sum((x[i, j] - y[i, j]) ** 2 for j in range(2)) for i in range(5)) / 5
    assert float(loss_mse(x, y)) == pytest.approx(naive, rel=1e-14)
    with pytest.raises(ValueError):
        loss_mse(x, y[:4])


def test_loss_rk_cases():
    const = np.ones((6, 2))
    assert float(loss_rk(const, np.arange(6.0), lambda z: ad.scale(z, 0.0))) == 0.0
    x = np.array([[1.0, 0.5], [1.3, 0.2]])
    g = lambda z: ad.sub(z, ad.square(z))
    expect = np.sum((x[1] - rk4_by_hand(lambda v: v - v * v, x[0], 0.3)) ** 2) / 2
    assert float(loss_rk(x, np.array([0.0, 0.3]), g)) == pytest.approx(expect, rel=1e-13)
    with pytest.raises(ValueError):
        loss_rk(x[:1], np.array([0.0]), g)


def test_loss_rk_non_uniform_steps():
    rng = np.random.default_rng(2)
    times = np.cumsum(rng.uniform(0.05, 0.2, size=8))
    x = rng.normal(size=(8, 2))
    g = lambda z: -z
    naive = sum(np.sum((x[i + 1] - rk4_by_hand(lambda v: -v, x[i], times[i + 1] - times[i])) ** 2)
                for i in range(7)) / 8
    assert float(loss_rk(x, times, g)) == pytest.approx(naive, rel=1e-13)


def test_loss_rk_exact_trajectory_local_error_only():
    t = 0.1 * np.arange(50)
    x = integrate(rhs_fhn, [2.0, 0.0], t, substeps=200).states
    per_pair = float(loss_rk(x, t, rhs_fhn)) * 50 / 49
    assert per_pair < 1e-10


def test_loss_grad_cases():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 2))
    g = lambda z: ad.scale(z, 2.0)
    assert float(loss_grad(x, 2.0 * x, g)) == 0.0
    unit = rng.normal(size=(6, 2))
    unit /= np.linalg.norm(unit, axis=1, keepdims=True)
    assert float(loss_grad(x, unit, lambda z: ad.scale(z, 0.0))) == pytest.approx(1.0)
    d = rng.normal(size=(6, 2))
    naive = sum(sum((2 * x[i, j] - d[i, j]) ** 2 for j in range(2)) for i in range(6)) / 6
    assert float(loss_grad(x, d, g)) == pytest.approx(naive, rel=1e-14)
    with pytest.raises(ValueError):
        loss_grad(x, d[:, :1], g)


def test_total_loss_decomposition_and_weights():
    ds = fhn_dataset()
    tr = build_transform(ds)
    i_p, d_p = init(I_SPEC, 0), init(D_SPEC, 1)
    for w in (LossWeights(0, 0), LossWeights(1, 1), LossWeights(0.3, 2.5)):
        br = total_loss([ds], i_p, d_p, w, tr).as_floats()
        assert br["total"] == br["mse"] + w.lambda_rk * br["rk"] + w.lambda_grad * br["grad"]
        assert min(br["mse"], br["rk"], br["grad"]) >= 0
    zero = total_loss([ds], i_p, d_p, LossWeights(0, 0), tr).as_floats()
    assert zero["total"] == zero["mse"]
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0)


def test_total_loss_gradient_check():
    ds = fhn_dataset()
    tr = build_transform(ds)
    i_p, d_p = init(I_SPEC, 0), init(D_SPEC, 1)
    params = {**{"i." + k: v for k, v in i_p.trainable().items()},
              **{"d." + k: v for k, v in d_p.trainable().items()}}

    def f(p):
        ip = {k[2:]: v for k, v in p.items() if k.startswith("i.")}
        dp = {k[2:]: v for k, v in p.items() if k.startswith("d.")}
        return total_loss([ds], (I_SPEC, ip), (D_SPEC, dp), LossWeights(1, 1), tr).total

    assert ad.gradient_check(f, params) < 1e-4


def test_total_loss_permutation_invariant_over_trajectories():
    spec_i = NetworkSpec("implicit_sine", 2, 2, 6, 2)
    spec_d = NetworkSpec("residual_mlp", 3, 2, 6, 1)
    a = TimeSeriesDataset(0.1 * np.arange(8), np.random.default_rng(0).normal(size=(8, 2)), mu=(0.1,))
    b = TimeSeriesDataset(0.1 * np.arange(8), np.random.default_rng(1).normal(size=(8, 2)), mu=(0.4,))
    tr = build_transform([a, b])
    i_p, d_p = init(spec_i, 0), init(spec_d, 1)
    ab = total_loss([a, b], i_p, d_p, LossWeights(), tr).as_floats()
    ba = total_loss([b, a], i_p, d_p, LossWeights(), tr).as_floats()
    assert ab == ba
    sa = total_loss([a], i_p, d_p, LossWeights(), tr).as_floats()["total"]
    sb = total_loss([b], i_p, d_p, LossWeights(), tr).as_floats()["total"]
    assert ab["total"] == pytest.approx(sa + sb, rel=1e-14)


def test_channels_on_different_grids():
    full = fhn_dataset(m=12)
    v = TimeSeriesDataset(full.times[::2], full.noisy[::2, :1], channels=("v",), state_index=(0,))
    w = TimeSeriesDataset(full.times[1::3], full.noisy[1::3, 1:], channels=("w",), state_index=(1,))
    tr = build_transform([v, w])
    br = total_loss([v, w], init(I_SPEC, 0), init(D_SPEC, 1), LossWeights(), tr).as_floats()
    assert np.isfinite(br["total"]) and br["rk"] > 0


def test_pde_mode_matches_manual_slices():
    grid = np.linspace(-8, 8, 8, endpoint=False)
    times = 0.1 * np.arange(5)
    u = np.exp(-((grid[None, :] + 2) ** 2)) * np.exp(-times[:, None])
    ds = SpatioTemporalDataset(times, grid, u, u)
    tr = build_transform(ds)
    i_spec = NetworkSpec("implicit_sine", 2, 1, 6, 2)
    d_spec = NetworkSpec("residual_conv1d", 1, 1, 3, 1)
    i_p, d_p = init(i_spec, 0), init(d_spec, 1)
    br = total_loss([ds], i_p, d_p, LossWeights(), tr, mode="pde", dynamics_mode="eval").as_floats()

    from rkdl.networks import dynamics_forward, implicit_forward

    tt, zz = np.meshgrid(times, grid, indexing="ij")
    x = implicit_forward(i_p, i_spec, tr.apply(np.column_stack([tt.ravel(), zz.ravel()]))).reshape(5, 8)
    g = lambda z: dynamics_forward(d_p, d_spec, z, mode="eval")
    mse = np.sum((x - u) ** 2) / 5
    rk = sum(np.sum((x[i + 1] - rk4_by_hand(lambda s: g(s[None])[0], x[i], 0.1)) ** 2) for i in range(4)) / 5
    assert br["mse"] == pytest.approx(mse, rel=1e-12)
    assert br["rk"] == pytest.approx(rk, rel=1e-10)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 3), st.floats(0, 3))
def test_terms_non_negative(seed, l_rk, l_grad):
    ds = fhn_dataset(m=6, seed=seed)
    br = total_loss([ds], init(I_SPEC, seed), init(D_SPEC, seed + 1), LossWeights(l_rk, l_grad),
                    build_transform(ds)).as_floats()
    assert br["mse"] >= 0 and br["rk"] >= 0 and br["grad"] >= 0
    assert br["total"] >= br["mse"]
