"""RK4 stepping, reference integrators and the benchmark right-hand sides."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import DualTensor, Tensor, add, scale, value_of

BLOWUP = 1e8

RK4_WEIGHTS = (1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0)


class IntegrationError(RuntimeError):
    """Raised on non-finite stages or solution blow-up."""


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states disagree in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")


def _is_node(x):
    return isinstance(x, (Tensor, DualTensor))


def _axpy(x, h, k):
    """x + h * k where h is a scalar or an array broadcastable against k."""
    if not (_is_node(x) or _is_node(k)):
        return x + np.asarray(h) * k
    if np.ndim(h) == 0:
        return add(x, scale(k, float(h)))
    return add(x, k * np.asarray(h, dtype=np.float64))


def _check_stage(k, stage):
    arr = value_of(k) if _is_node(k) else np.asarray(k)
    if not np.isfinite(arr).all():
        raise IntegrationError(f"non-finite value in RK4 stage k{stage}")


def rk4_step(g: Callable, x, h):
    """One classical Runge-Kutta step ``x + h (k1/6 + k2/3 + k3/3 + k4/6)``.

    ``g`` may be a plain function or a network evaluated on the tape; ``h``
    may be an array (one step size per row of ``x``).
    """
    if np.any(~np.isfinite(h)) or np.any(np.asarray(h) <= 0):
        raise ValueError("step size must be positive and finite")
    half = np.asarray(h, dtype=np.float64) * 0.5
    k1 = g(x)
    _check_stage(k1, 1)
    k2 = g(_axpy(x, half, k1))
    _check_stage(k2, 2)
    k3 = g(_axpy(x, half, k2))
    _check_stage(k3, 3)
    k4 = g(_axpy(x, h, k3))
    _check_stage(k4, 4)
    if not any(_is_node(k) for k in (x, k1, k2, k3, k4)):
        incr = (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        return x + np.asarray(h) * incr
    w1, w2, w3, w4 = RK4_WEIGHTS
    incr = add(add(scale(k1, w1), scale(k2, w2)), add(scale(k3, w3), scale(k4, w4)))
    return _axpy(x, h, incr)


def integrate(g: Callable, x0, t_grid, substeps: int | None = None,
              max_step: float | None = None) -> Trajectory:
    """Fixed-step RK4 integration reported on ``t_grid``.

    By default every interval is split into at least 100 sub-steps and no
    sub-step exceeds ``1e-3 * (t_end - t_0)``.  ``substeps`` fixes the split
    per interval; ``max_step`` bounds the sub-step length instead.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or len(t_grid) < 1:
        raise ValueError("t_grid must be a non-empty 1-D array")
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    x = np.array(x0, dtype=np.float64)
    states = np.empty((len(t_grid),) + x.shape)
    states[0] = x
    span = t_grid[-1] - t_grid[0]
    for i in range(len(t_grid) - 1):
        h_total = t_grid[i + 1] - t_grid[i]
        if substeps is not None:
            n = int(substeps)
        elif max_step is not None:
            n = max(1, math.ceil(h_total / max_step - 1e-12))
        else:
            n = max(100, math.ceil(h_total / (1e-3 * span) - 1e-12))
        h = h_total / n
        half, sixth = 0.5 * h, h / 6.0
        for j in range(n):
            k1 = g(x)
            k2 = g(x + half * k1)
            k3 = g(x + half * k2)
            k4 = g(x + h * k3)
            x = x + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        if not np.all(np.abs(x) <= BLOWUP):
            raise IntegrationError(f"solution blew up before t = {t_grid[i + 1]:.6g}")
        states[i + 1] = x
    return Trajectory(t_grid, states)


# ---------------------------------------------------------------- benchmarks


def rhs_fhn(x):
    """FitzHugh-Nagumo vector field; ``x[..., 0] = v``, ``x[..., 1] = w``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (2,):
        v, w = float(x[0]), float(x[1])
        return np.array([v - w - v * v * v / 3.0 + 0.5, 0.040 * v - 0.028 * w + 0.032])
    v, w = x[..., 0], x[..., 1]
    return np.stack([v - w - v**3 / 3.0 + 0.5, 0.040 * v - 0.028 * w + 0.032], axis=-1)


def rhs_cubic(x):
    """Damped cubic oscillator."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape == (2,):
        a, b = float(x[0]) ** 3, float(x[1]) ** 3
        return np.array([-0.1 * a + 2.0 * b, -2.0 * a - 0.1 * b])
    a, b = x[..., 0] ** 3, x[..., 1] ** 3
    return np.stack([-0.1 * a + 2.0 * b, -2.0 * a - 0.1 * b], axis=-1)


def _wavenumbers(n, length):
    return 2.0 * np.pi * np.fft.rfftfreq(n, d=length / n)


def _dealias_mask(n):
    k = np.arange(n // 2 + 1)
    return (k < n / 3.0).astype(np.float64)


def solve_burgers(u0, times, viscosity=0.1, domain=(-8.0, 8.0), substeps=100):
    """Viscous Burgers ``u_t = nu u_xx - u u_x`` on a periodic domain.

    Pseudo-spectral in space (2/3 de-aliasing of the conservative flux
    ``(u^2/2)_x``) and RK4 in time with ``substeps`` steps per output interval.
    Returns an array of shape (len(times), len(u0)).
    """
    u = np.array(u0, dtype=np.float64)
    n = len(u)
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    k = _wavenumbers(n, domain[1] - domain[0])
    if n % 2 == 0:
        k_odd = k.copy()
        k_odd[-1] = 0.0
    else:
        k_odd = k
    mask = _dealias_mask(n)
    lap = -viscosity * k**2

    def rhs(u_hat):
        u_phys = np.fft.irfft(u_hat, n)
        flux = np.fft.rfft(0.5 * u_phys * u_phys) * mask
        return lap * u_hat - 1j * k_odd * flux

    dt_max = (times[-1] - times[0]) / max(len(times) - 1, 1) / substeps
    if viscosity * np.max(k**2) * dt_max > 2.5:
        raise IntegrationError("time step violates the diffusive stability limit")

    u_hat = np.fft.rfft(u)
    out = np.empty((len(times), n))
    out[0] = u
    for i in range(len(times) - 1):
        h = (times[i + 1] - times[i]) / substeps
        for _ in range(substeps):
            u_hat = rk4_step(rhs, u_hat, h)
        out[i + 1] = np.fft.irfft(u_hat, n)
        if not np.all(np.abs(out[i + 1]) <= BLOWUP):
            raise IntegrationError(f"Burgers solution blew up at t = {times[i + 1]:.6g}")
    return out


def solve_ks(u0, times, domain_length=32.0 * np.pi, substeps=4, contour_points=32):
    """Kuramoto-Sivashinsky ``u_t = -u u_x - u_xx - u_xxxx``, periodic.

    Fourier spectral in space with ETDRK4 time stepping (coefficients by
    contour-integral averaging).  Returns (len(times), len(u0)).
    """
    u = np.array(u0, dtype=np.float64)
    n = len(u)
    times = np.asarray(times, dtype=np.float64)
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise ValueError("solve_ks needs uniformly spaced output times")
    h = steps[0] / substeps

    k = _wavenumbers(n, domain_length)
    k_odd = k.copy()
    if n % 2 == 0:
        k_odd[-1] = 0.0
    L = k**2 - k**4
    E = np.exp(h * L)
    E2 = np.exp(h * L / 2.0)
    r = np.exp(1j * np.pi * (np.arange(1, contour_points + 1) - 0.5) / contour_points)
    LR = h * L[:, None] + r[None, :]
    Q = h * np.real(np.mean((np.exp(LR / 2.0) - 1.0) / LR, axis=1))
    f1 = h * np.real(np.mean((-4.0 - LR + np.exp(LR) * (4.0 - 3.0 * LR + LR**2)) / LR**3, axis=1))
    f2 = h * np.real(np.mean((2.0 + LR + np.exp(LR) * (-2.0 + LR)) / LR**3, axis=1))
    f3 = h * np.real(np.mean((-4.0 - 3.0 * LR - LR**2 + np.exp(LR) * (4.0 - LR)) / LR**3, axis=1))
    g = -0.5j * k_odd
    mask = _dealias_mask(n)

    def nonlinear(v_hat):
        u_phys = np.fft.irfft(v_hat, n)
        return g * np.fft.rfft(u_phys * u_phys) * mask

    v = np.fft.rfft(u)
    out = np.empty((len(times), n))
    out[0] = u
    for i in range(len(times) - 1):
        for _ in range(substeps):
            Nv = nonlinear(v)
            a = E2 * v + Q * Nv
            Na = nonlinear(a)
            b = E2 * v + Q * Na
            Nb = nonlinear(b)
            c = E2 * a + Q * (2.0 * Nb - Nv)
            Nc = nonlinear(c)
            v = E * v + Nv * f1 + 2.0 * (Na + Nb) * f2 + Nc * f3
        out[i + 1] = np.fft.irfft(v, n)
        if not np.all(np.abs(out[i + 1]) <= BLOWUP):
            raise IntegrationError(f"KS solution blew up at t = {times[i + 1]:.6g}")
    return out


def finite_difference_derivative(values, times) -> np.ndarray:
    """Time derivative along axis 0.

    Second-order central differences inside, second-order one-sided formulas at
    both ends; non-uniform spacing is supported.
    """
    y = np.asarray(values, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    if len(t) < 3 or len(y) != len(t):
        raise ValueError("finite differences need at least 3 samples aligned with times")
    return np.gradient(y, t, axis=0, edge_order=2)
