"""Measurement containers, noise injection, input scaling and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class DatasetFormatError(ValueError):
    """Malformed or inconsistent dataset file."""


def _strictly_increasing(values, what="times"):
    values = np.asarray(values, dtype=np.float64)
    bad = np.nonzero(np.diff(values) <= 0)[0]
    if bad.size:
        i = int(bad[0]) + 1
        raise ValueError(f"{what} must be strictly increasing (row {i}: {values[i]!r})")


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """Samples ``noisy[i]`` of an n-channel state at ``times[i]``.

    ``state_index`` maps the stored columns onto state components, which lets
    channels living on different time grids be stored as separate datasets.
    """

    times: np.ndarray
    noisy: np.ndarray
    clean: np.ndarray | None = None
    channels: tuple[str, ...] = ()
    state_index: tuple[int, ...] | None = None
    mu: tuple[float, ...] | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        noisy = np.asarray(self.noisy, dtype=np.float64)
        if noisy.ndim == 1:
            noisy = noisy[:, None]
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "noisy", noisy)
        if self.clean is not None:
            clean = np.asarray(self.clean, dtype=np.float64).reshape(noisy.shape)
            object.__setattr__(self, "clean", clean)
        if times.ndim != 1 or len(times) < 2:
            raise ValueError("a dataset needs at least 2 samples")
        if noisy.shape[0] != len(times):
            raise ValueError(f"values have {noisy.shape[0]} rows but there are {len(times)} times")
        _strictly_increasing(times)
        if not self.channels:
            object.__setattr__(self, "channels", tuple(f"x{i + 1}" for i in range(noisy.shape[1])))
        if len(self.channels) != noisy.shape[1]:
            raise ValueError("one channel name per column is required")
        if self.state_index is None:
            object.__setattr__(self, "state_index", tuple(range(noisy.shape[1])))
        if self.mu is not None:
            object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))

    @property
    def n_samples(self) -> int:
        return len(self.times)

    @property
    def n_channels(self) -> int:
        return self.noisy.shape[1]


@dataclass(frozen=True, eq=False)
class SpatioTemporalDataset:
    """Scalar field sampled on a (time x uniform periodic grid) lattice."""

    times: np.ndarray
    grid: np.ndarray
    noisy: np.ndarray
    clean: np.ndarray | None = None
    name: str = "u"
    mu: tuple[float, ...] | None = None
    period: float | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        grid = np.asarray(self.grid, dtype=np.float64)
        noisy = np.asarray(self.noisy, dtype=np.float64)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "noisy", noisy)
        if self.clean is not None:
            object.__setattr__(self, "clean", np.asarray(self.clean, dtype=np.float64))
            if self.clean.shape != noisy.shape:
                raise ValueError("clean and noisy fields differ in shape")
        if noisy.shape != (len(times), len(grid)):
            raise ValueError(f"field shape {noisy.shape} != ({len(times)}, {len(grid)})")
        if len(times) < 2 or len(grid) < 2:
            raise ValueError("need at least 2 times and 2 grid points")
        _strictly_increasing(times)
        _strictly_increasing(grid, "grid")
        dz = np.diff(grid)
        if not np.allclose(dz, dz[0], rtol=1e-9, atol=1e-12):
            raise ValueError("spatial grid must be uniform")
        if self.period is None:
            object.__setattr__(self, "period", float(dz[0] * len(grid)))
        if self.mu is not None:
            object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))

    @property
    def n_samples(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class NoiseSpec:
    level: float
    seed: int = 0
    scale: str = "std"

    def __post_init__(self):
        if not self.level >= 0:
            raise ValueError("noise level must be non-negative")
        if self.scale not in ("std", "range", "absolute"):
            raise ValueError(f"unknown noise scale {self.scale!r}")


def noise_sigma(clean, spec: NoiseSpec, channel_axis: int | None = -1) -> np.ndarray:
    """Standard deviation of the noise that ``spec`` injects, per channel."""
    clean = np.asarray(clean, dtype=np.float64)
    if channel_axis is None:
        flat = clean.reshape(-1, 1)
    else:
        flat = np.moveaxis(clean, channel_axis, -1).reshape(-1, clean.shape[channel_axis])
    if spec.scale == "absolute":
        return np.full(flat.shape[1], spec.level)
    if spec.scale == "std":
        ref = flat.std(axis=0)
    else:
        ref = flat.max(axis=0) - flat.min(axis=0)
    return spec.level * ref


def add_noise(clean, spec: NoiseSpec, channel_axis: int | None = -1) -> np.ndarray:
    """Gaussian noise with per-channel std ``level * std(channel)``.

    ``channel_axis=None`` treats the whole array as a single channel (used for
    spatio-temporal fields).
    """
    clean = np.asarray(clean, dtype=np.float64)
    if spec.level == 0:
        return clean.copy()
    sigma = noise_sigma(clean, spec, channel_axis)
    if np.any(sigma <= 0):
        raise ValueError("cannot scale noise to a constant channel")
    eps = np.random.default_rng(spec.seed).standard_normal(clean.shape)
    if channel_axis is None:
        return clean + sigma[0] * eps
    shape = [1] * clean.ndim
    shape[channel_axis] = -1
    return clean + eps * sigma.reshape(shape)


def with_noise(dataset, spec: NoiseSpec):
    """Copy of ``dataset`` whose noisy values are regenerated from the clean ones."""
    if dataset.clean is None:
        raise ValueError("dataset has no clean values to corrupt")
    axis = None if isinstance(dataset, SpatioTemporalDataset) else -1
    return replace(dataset, noisy=add_noise(dataset.clean, spec, axis))


@dataclass(frozen=True)
class InputTransform:
    """Per-coordinate affine map sending [lo, hi] onto [-1, 1]."""

    lo: np.ndarray
    hi: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if lo.shape != hi.shape or np.any(~(hi > lo)):
            raise ValueError("degenerate input range; need hi > lo for every coordinate")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def time_jacobian(self) -> float:
        """d(normalised t) / dt."""
        return 2.0 / (self.hi[0] - self.lo[0])

    def apply(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        return 2.0 * (raw - self.lo) / (self.hi - self.lo) - 1.0

    def inverse(self, normalized) -> np.ndarray:
        normalized = np.asarray(normalized, dtype=np.float64)
        return self.lo + (normalized + 1.0) * 0.5 * (self.hi - self.lo)


def build_transform(datasets) -> InputTransform:
    """Input scaling for the implicit network over (t[, zeta][, mu...])."""
    if isinstance(datasets, (TimeSeriesDataset, SpatioTemporalDataset)):
        datasets = [datasets]
    datasets = list(datasets)
    names = ["t"]
    los = [min(float(d.times[0]) for d in datasets)]
    his = [max(float(d.times[-1]) for d in datasets)]
    if isinstance(datasets[0], SpatioTemporalDataset):
        names.append("zeta")
        los.append(min(float(d.grid[0]) for d in datasets))
        his.append(max(float(d.grid[-1]) for d in datasets))
    mus = [d.mu for d in datasets]
    if any(m is not None for m in mus):
        if any(m is None for m in mus):
            raise ValueError("either every dataset carries mu or none does")
        arr = np.array(mus, dtype=np.float64)
        for j in range(arr.shape[1]):
            names.append(f"mu{j + 1}")
            los.append(float(arr[:, j].min()))
            his.append(float(arr[:, j].max()))
    return InputTransform(np.array(los), np.array(his), tuple(names))


def subsample(dataset, stride: int = 1, keep_fraction: float | None = None,
              seed: int = 0, channels: Sequence[int] | None = None):
    """Thin out the time samples of ``dataset``.

    ``stride`` keeps every stride-th sample; ``keep_fraction`` keeps each sample
    independently with that probability.  ``channels`` (column indices) limits
    a time-series dataset to a channel group, so that each group can live on its
    own time grid.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    keep = np.zeros(dataset.n_samples, dtype=bool)
    keep[::stride] = True
    if keep_fraction is not None:
        if not 0 < keep_fraction <= 1:
            raise ValueError("keep_fraction must be in (0, 1]")
        keep &= np.random.default_rng(seed).random(dataset.n_samples) < keep_fraction
    if keep.sum() < 2:
        raise ValueError("subsampling leaves fewer than 2 samples")
    clean = None if dataset.clean is None else dataset.clean[keep]
    if isinstance(dataset, SpatioTemporalDataset):
        if channels is not None:
            raise ValueError("channel groups apply to time-series datasets only")
        return replace(dataset, times=dataset.times[keep], noisy=dataset.noisy[keep], clean=clean)
    cols = list(range(dataset.n_channels)) if channels is None else list(channels)
    return TimeSeriesDataset(
        times=dataset.times[keep],
        noisy=dataset.noisy[keep][:, cols],
        clean=None if clean is None else clean[:, cols],
        channels=tuple(dataset.channels[c] for c in cols),
        state_index=tuple(dataset.state_index[c] for c in cols),
        mu=dataset.mu,
    )


# ---------------------------------------------------------------- CSV


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_csv(dataset, path) -> None:
    """Header ``t,[zeta,]<ch>_noisy...,<ch>_clean...``; spatio-temporal data in long form."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        if isinstance(dataset, SpatioTemporalDataset):
            header = ["t", "zeta", f"{dataset.name}_noisy"]
            if dataset.clean is not None:
                header.append(f"{dataset.name}_clean")
            writer.writerow(header)
            for i, t in enumerate(dataset.times):
                for j, z in enumerate(dataset.grid):
                    row = [_fmt(t), _fmt(z), _fmt(dataset.noisy[i, j])]
                    if dataset.clean is not None:
                        row.append(_fmt(dataset.clean[i, j]))
                    writer.writerow(row)
            return
        header = ["t"] + [f"{c}_noisy" for c in dataset.channels]
        if dataset.clean is not None:
            header += [f"{c}_clean" for c in dataset.channels]
        writer.writerow(header)
        for i, t in enumerate(dataset.times):
            row = [_fmt(t)] + [_fmt(v) for v in dataset.noisy[i]]
            if dataset.clean is not None:
                row += [_fmt(v) for v in dataset.clean[i]]
            writer.writerow(row)


def read_csv(path):
    """Inverse of :func:`write_csv`; raises :class:`DatasetFormatError` with line numbers."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path}: line 1: empty file")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t":
        raise DatasetFormatError(f"{path}: line 1: missing header (first column must be 't')")
    spatial = len(header) > 1 and header[1] == "zeta"
    value_cols = header[2:] if spatial else header[1:]
    noisy_names = [h[: -len("_noisy")] for h in value_cols if h.endswith("_noisy")]
    clean_names = [h[: -len("_clean")] for h in value_cols if h.endswith("_clean")]
    if not noisy_names or len(noisy_names) + len(clean_names) != len(value_cols):
        raise DatasetFormatError(f"{path}: line 1: columns must be <name>_noisy / <name>_clean")
    if clean_names and clean_names != noisy_names:
        raise DatasetFormatError(f"{path}: line 1: clean columns must mirror noisy columns")

    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DatasetFormatError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
            )
        try:
            values = [float(c) for c in row]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        if not all(math.isfinite(v) for v in values):
            raise DatasetFormatError(f"{path}: line {lineno}: non-finite value")
        data.append(values)
    if len(data) < 2:
        raise DatasetFormatError(f"{path}: fewer than 2 data rows")
    arr = np.array(data)
    n = len(noisy_names)

    if not spatial:
        t = arr[:, 0]
        bad = np.nonzero(np.diff(t) <= 0)[0]
        if bad.size:
            raise DatasetFormatError(
                f"{path}: line {int(bad[0]) + 3}: time {t[bad[0] + 1]!r} is not greater "
                "than the previous row"
            )
        return TimeSeriesDataset(
            times=t,
            noisy=arr[:, 1 : 1 + n],
            clean=arr[:, 1 + n :] if clean_names else None,
            channels=tuple(noisy_names),
        )

    if n != 1:
        raise DatasetFormatError(f"{path}: line 1: spatio-temporal files hold one field")
    t_col, z_col = arr[:, 0], arr[:, 1]
    times = np.unique(t_col)
    n_t = len(times)
    if len(arr) % n_t:
        raise DatasetFormatError(f"{path}: incomplete (time x zeta) lattice")
    n_z = len(arr) // n_t
    grid = z_col[:n_z]
    expected_t = np.repeat(times, n_z)
    expected_z = np.tile(grid, n_t)
    mismatch = np.nonzero((t_col != expected_t) | (z_col != expected_z))[0]
    if mismatch.size:
        raise DatasetFormatError(
            f"{path}: line {int(mismatch[0]) + 2}: rows must be sorted by t then zeta "
            "on a complete lattice"
        )
    return SpatioTemporalDataset(
        times=times,
        grid=grid,
        noisy=arr[:, 2].reshape(n_t, n_z),
        clean=arr[:, 3].reshape(n_t, n_z) if clean_names else None,
        name=noisy_names[0],
    )
