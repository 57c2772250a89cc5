"""Training objective: data fit + RK4 consistency + tangent matching.

    total = mse + lambda_rk * rk + lambda_grad * grad

with, for implicit-network outputs ``x_i`` at times ``t_i`` (i = 1..M),

    mse  = 1/M sum_i      |x_i - y_i|^2
    rk   = 1/M sum_{i<M}  |x_{i+1} - RK4(N_dyn, x_i, t_{i+1} - t_i)|^2
    grad = 1/M sum_i      |N_dyn(x_i) - dx/dt(t_i)|^2
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .dataset import InputTransform, SpatioTemporalDataset, TimeSeriesDataset
from .integrators import rk4_step
from .networks import NetworkSpec, ParameterSet, dynamics_forward, implicit_forward_tangent


@dataclass(frozen=True)
class LossWeights:
    lambda_rk: float = 1.0
    lambda_grad: float = 1.0

    def __post_init__(self):
        if self.lambda_rk < 0 or self.lambda_grad < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """Loss terms; entries are tape nodes while training and floats otherwise."""

    mse: object
    rk: object
    grad: object
    total: object

    def as_floats(self) -> dict:
        return {k: float(ad.value_of(getattr(self, k))) for k in ("mse", "rk", "grad", "total")}


def _n_rows(x):
    return ad.value_of(x).shape[0]


def loss_mse(x_pred, y):
    """Mean over samples of the squared Euclidean residual norm (no square root)."""
    y = np.asarray(y, dtype=np.float64)
    if ad.value_of(x_pred).shape != y.shape:
        raise ValueError(f"prediction shape {ad.value_of(x_pred).shape} != data shape {y.shape}")
    return ad.scale(ad.tsum(ad.square(ad.sub(x_pred, y))), 1.0 / y.shape[0])


def _step_sizes(times, ndim):
    h = np.diff(np.asarray(times, dtype=np.float64))
    return h.reshape((-1,) + (1,) * (ndim - 1))


def loss_rk(x_pred, times, dynamics: Callable):
    """RK4 one-step mismatch over consecutive samples, normalised by M."""
    times = np.asarray(times, dtype=np.float64)
    m = len(times)
    if m < 2:
        raise ValueError("the RK term needs at least 2 samples")
    if _n_rows(x_pred) != m:
        raise ValueError("x_pred and times disagree in length")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    h = _step_sizes(times, ad.value_of(x_pred).ndim)
    x0 = x_pred[:-1]
    x1 = x_pred[1:]
    pred = rk4_step(dynamics, x0, h)
    return ad.scale(ad.tsum(ad.square(ad.sub(x1, pred))), 1.0 / m)


def loss_grad(x_pred, dx_dt, dynamics: Callable):
    """Mean squared mismatch between the vector field and the implicit tangents."""
    field = dynamics(x_pred)
    if ad.value_of(field).shape != ad.value_of(dx_dt).shape:
        raise ValueError(
            f"vector field shape {ad.value_of(field).shape} != tangent shape "
            f"{ad.value_of(dx_dt).shape}"
        )
    return ad.scale(ad.tsum(ad.square(ad.sub(field, dx_dt))), 1.0 / _n_rows(x_pred))


def _unpack(net):
    if isinstance(net, ParameterSet):
        return net.spec, net.tensors
    spec, params = net
    return spec, params


def _group_key(ds):
    return (ds.mu is not None, ds.mu or ())


def _sorted_groups(datasets):
    groups: dict = {}
    for ds in datasets:
        groups.setdefault(_group_key(ds), []).append(ds)
    return [
        sorted(groups[k], key=lambda d: (tuple(getattr(d, "state_index", ()) or ()),
                                         float(d.times[0]), d.n_samples))
        for k in sorted(groups)
    ]


def total_loss(datasets: Sequence, implicit, dynamics, weights: LossWeights,
               transform: InputTransform, mode: str = "ode", dynamics_mode: str = "train",
               bn_updates: dict | None = None) -> LossBreakdown:
    """Full objective over one or more trajectories.

    ``implicit`` / ``dynamics`` are ParameterSets or ``(spec, mapping)`` pairs
    whose mapping may hold tape leaves.  Datasets sharing ``mu`` form one
    trajectory; per-trajectory losses are summed.
    """
    if isinstance(datasets, (TimeSeriesDataset, SpatioTemporalDataset)):
        datasets = [datasets]
    i_spec, i_params = _unpack(implicit)
    d_spec, d_params = _unpack(dynamics)
    if mode not in ("ode", "pde"):
        raise ValueError(f"unknown mode {mode!r}")

    mse = rk = grad = 0.0
    for group in _sorted_groups(datasets):
        mu = group[0].mu
        mu_norm = None
        if mu is not None:
            offset = 2 if mode == "pde" else 1
            mu_norm = transform.apply(np.r_[transform.lo[:offset], mu])[offset:]

        def field(z, mu_norm=mu_norm):
            return dynamics_forward(d_params, d_spec, z, mu=mu_norm, mode=dynamics_mode,
                                    bn_updates=bn_updates)

        if mode == "ode":
            g_mse, g_rk, g_grad = _ode_terms(group, i_spec, i_params, d_spec, field, transform, mu)
        else:
            g_mse, g_rk, g_grad = _pde_terms(group, i_spec, i_params, field, transform, mu)
        mse = ad.add(mse, g_mse)
        rk = ad.add(rk, g_rk)
        grad = ad.add(grad, g_grad)

    total = ad.add(ad.add(mse, ad.scale(rk, weights.lambda_rk)), ad.scale(grad, weights.lambda_grad))
    return LossBreakdown(mse, rk, grad, total)


def _ode_terms(group, i_spec: NetworkSpec, i_params, d_spec: NetworkSpec, field, transform, mu):
    times = np.unique(np.concatenate([d.times for d in group]))
    coords = times[:, None]
    if mu is not None:
        coords = np.column_stack([coords, np.broadcast_to(mu, (len(times), len(mu)))])
    x, dx_dt = implicit_forward_tangent(i_params, i_spec, transform.apply(coords),
                                        transform.time_jacobian)
    mse = 0.0
    for ds in group:
        rows = np.searchsorted(times, ds.times)
        cols = list(ds.state_index)
        if len(rows) == len(times) and cols == list(range(i_spec.output_dim)):
            xp = x
        else:
            xp = x[rows[:, None], np.asarray(cols)[None, :]]
        mse = ad.add(mse, loss_mse(xp, ds.noisy))
    if len(times) < 2:
        return mse, 0.0, 0.0
    return mse, loss_rk(x, times, field), loss_grad(x, dx_dt, field)


def _pde_terms(group, i_spec, i_params, field, transform, mu):
    if len(group) != 1:
        raise ValueError("one spatio-temporal dataset per parameter value is supported")
    ds = group[0]
    n_t, n_s = len(ds.times), len(ds.grid)
    tt, zz = np.meshgrid(ds.times, ds.grid, indexing="ij")
    coords = np.column_stack([tt.ravel(), zz.ravel()])
    if mu is not None:
        coords = np.column_stack([coords, np.broadcast_to(mu, (len(coords), len(mu)))])
    x, dx_dt = implicit_forward_tangent(i_params, i_spec, transform.apply(coords),
                                        transform.time_jacobian)
    x = ad.reshape(x, (n_t, n_s))
    dx_dt = ad.reshape(dx_dt, (n_t, n_s))
    return (
        loss_mse(x, ds.noisy),
        loss_rk(x, ds.times, field),
        loss_grad(x, dx_dt, field),
    )
