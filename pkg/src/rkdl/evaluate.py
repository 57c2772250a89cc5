"""De-noising and vector-field accuracy metrics, field lattices and heatmaps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import InputTransform, SpatioTemporalDataset, TimeSeriesDataset
from .networks import ParameterSet, dynamics_forward, implicit_forward

# diverging map: cold end, neutral middle, hot end (8-bit RGB)
COLD = np.array([33, 102, 172], dtype=np.float64)
NEUTRAL = np.array([247, 247, 247], dtype=np.float64)
HOT = np.array([178, 24, 43], dtype=np.float64)


def _implicit_coords(dataset, transform: InputTransform):
    if isinstance(dataset, SpatioTemporalDataset):
        tt, zz = np.meshgrid(dataset.times, dataset.grid, indexing="ij")
        coords = np.column_stack([tt.ravel(), zz.ravel()])
    else:
        coords = dataset.times[:, None]
    if dataset.mu is not None:
        coords = np.column_stack([coords, np.broadcast_to(dataset.mu, (len(coords), len(dataset.mu)))])
    return transform.apply(coords)


def denoised(implicit: ParameterSet, dataset, transform: InputTransform) -> np.ndarray:
    """Implicit-network estimate at the dataset's sample locations, shaped like ``noisy``."""
    x = implicit_forward(implicit, implicit.spec, _implicit_coords(dataset, transform))
    if isinstance(dataset, SpatioTemporalDataset):
        return x.reshape(dataset.noisy.shape)
    return x[:, list(dataset.state_index)]


def denoise_rmse(implicit: ParameterSet, dataset, transform: InputTransform) -> np.ndarray:
    """Per-channel RMS of (implicit output - clean) over the measurement locations."""
    if dataset.clean is None:
        raise ValueError("dataset has no clean reference")
    err = denoised(implicit, dataset, transform) - dataset.clean
    if isinstance(dataset, SpatioTemporalDataset):
        return np.array([np.sqrt(np.mean(err**2))])
    return np.sqrt(np.mean(err**2, axis=0))


def relative_l2(estimate, reference) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    return float(np.linalg.norm(np.asarray(estimate) - reference) / np.linalg.norm(reference))


@dataclass
class FieldGrid:
    axes: list
    points: np.ndarray
    predicted: np.ndarray
    true: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    def __post_init__(self):
        if self.true is not None and self.true.shape != self.predicted.shape:
            raise ValueError("predicted and true fields differ in shape")


def lattice(bounds: Sequence[tuple], resolution) -> tuple[list, np.ndarray]:
    if np.ndim(resolution) == 0:
        resolution = [int(resolution)] * len(bounds)
    if any(r < 2 for r in resolution):
        raise ValueError("resolution must be >= 2 per axis")
    axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(bounds, resolution)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return axes, np.stack([m.ravel() for m in mesh], axis=-1)


def field_grid(dynamics, bounds, resolution=21, true_rhs: Callable | None = None,
               mu=None) -> FieldGrid:
    """Evaluate a dynamics network (ParameterSet or callable) on a state lattice."""
    axes, points = lattice(bounds, resolution)
    if isinstance(dynamics, ParameterSet):
        predicted = dynamics_forward(dynamics, dynamics.spec, points, mu=mu, mode="eval")
    else:
        predicted = np.asarray(dynamics(points), dtype=np.float64)
    true = None if true_rhs is None else np.asarray(true_rhs(points), dtype=np.float64)
    return FieldGrid(axes, points, np.asarray(predicted), true)


def data_region_mask(grid: FieldGrid, trajectory, radius: float) -> np.ndarray:
    """Lattice points within ``radius`` of the trajectory, plus the node nearest
    to every trajectory point (so the mask never empties as radius -> 0)."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    traj = np.asarray(trajectory, dtype=np.float64)
    mask = np.zeros(len(grid.points), dtype=bool)
    nearest = np.empty(len(traj), dtype=np.int64)
    for start in range(0, len(traj), 512):
        chunk = traj[start : start + 512]
        d2 = ((grid.points[None, :, :] - chunk[:, None, :]) ** 2).sum(-1)
        mask |= (d2 <= radius * radius).any(axis=0)
        nearest[start : start + 512] = d2.argmin(axis=1)
    mask[nearest] = True
    return mask


def default_radius(trajectory) -> float:
    """10 % of the trajectory bounding-box diagonal."""
    traj = np.asarray(trajectory)
    return 0.1 * float(np.linalg.norm(traj.max(axis=0) - traj.min(axis=0)))


def field_metrics(predicted, true, mask=None) -> tuple[float, float]:
    """(relative L2 error, mean cosine similarity) over the masked vectors."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if mask is not None:
        predicted, true = predicted[mask], true[mask]
    rel = relative_l2(predicted, true)
    pn = np.linalg.norm(predicted, axis=-1)
    tn = np.linalg.norm(true, axis=-1)
    ok = (pn > 0) & (tn > 0)
    cos = np.clip((predicted[ok] * true[ok]).sum(-1) / (pn[ok] * tn[ok]), -1.0, 1.0)
    return rel, float(cos.mean()) if cos.size else float("nan")


def pde_field(dynamics: ParameterSet, states, mu=None) -> np.ndarray:
    """Convolutional vector field on each time slice of a (T, S) field (eval mode)."""
    return np.asarray(dynamics_forward(dynamics, dynamics.spec, np.asarray(states), mu=mu,
                                       mode="eval"))


def write_field_csv(grid: FieldGrid, mask, path) -> None:
    n = grid.points.shape[1]
    header = [f"x{i + 1}" for i in range(n)] + [f"pred{i + 1}" for i in range(n)]
    if grid.true is not None:
        header += [f"true{i + 1}" for i in range(n)]
    header.append("mask")
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(len(grid.points)):
            row = [f"{v:.17g}" for v in grid.points[k]] + [f"{v:.17g}" for v in grid.predicted[k]]
            if grid.true is not None:
                row += [f"{v:.17g}" for v in grid.true[k]]
            row.append(int(bool(mask[k])) if mask is not None else 1)
            writer.writerow(row)


def colormap(u) -> np.ndarray:
    """Map values in [0, 1] to RGB on the cold-neutral-hot ramp."""
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)[..., None]
    lower = COLD + (NEUTRAL - COLD) * (u / 0.5)
    upper = NEUTRAL + (HOT - NEUTRAL) * ((u - 0.5) / 0.5)
    return np.rint(np.where(u <= 0.5, lower, upper)).astype(np.uint8)


def export_heatmap(values, path, pixel: int = 1) -> Path:
    """Binary PPM of a (time x space) field; min -> cold end, max -> hot end.

    The value range is written next to the image as ``<path>.txt``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or not np.isfinite(values).all():
        raise ValueError("heatmap needs a finite 2-D array")
    lo, hi = float(values.min()), float(values.max())
    u = np.full(values.shape, 0.5) if hi == lo else (values - lo) / (hi - lo)
    rgb = colormap(u)
    if pixel > 1:
        rgb = np.repeat(np.repeat(rgb, pixel, axis=0), pixel, axis=1)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())
    Path(str(path) + ".txt").write_text(
        f"min = {lo:.17g}\nmax = {hi:.17g}\nrows = time ({values.shape[0]})\n"
        f"cols = space ({values.shape[1]})\n"
    )
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM file")
    width, height = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width, 3)


@dataclass
class EvalReport:
    denoise_rmse: list
    noise_sigma: list | None = None
    field_rel_l2: float = float("nan")
    field_cosine: float = float("nan")
    denoise_rel_l2: float = float("nan")
    runtime_seconds: float = 0.0
    config: dict = field(default_factory=dict)
    passed: bool | None = None
    failures: list = field(default_factory=list)

    def to_lines(self) -> list[str]:
        lines = [f"denoise_rmse.{i} = {v:.10g}" for i, v in enumerate(self.denoise_rmse)]
        if self.noise_sigma is not None:
            lines += [f"noise_sigma.{i} = {v:.10g}" for i, v in enumerate(self.noise_sigma)]
        lines += [
            f"denoise_rel_l2 = {self.denoise_rel_l2:.10g}",
            f"field_rel_l2 = {self.field_rel_l2:.10g}",
            f"field_cosine = {self.field_cosine:.10g}",
            f"runtime_seconds = {self.runtime_seconds:.3f}",
        ]
        if self.passed is not None:
            lines.append(f"passed = {str(self.passed).lower()}")
            lines += [f"failure.{i} = {msg}" for i, msg in enumerate(self.failures)]
        lines += [f"config.{k} = {v}" for k, v in sorted(self.config.items())]
        return lines

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out
