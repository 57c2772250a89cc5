"""Experiment presets, config files and the generate/train/evaluate/sweep pipeline."""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import math
import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .constraint_loss import LossWeights, total_loss
from .dataset import (
    NoiseSpec,
    SpatioTemporalDataset,
    TimeSeriesDataset,
    InputTransform,
    build_transform,
    noise_sigma,
    read_csv,
    subsample,
    with_noise,
    write_csv,
)
from .evaluate import (
    EvalReport,
    data_region_mask,
    default_radius,
    denoise_rmse,
    denoised,
    export_heatmap,
    field_grid,
    field_metrics,
    pde_field,
    relative_l2,
    write_field_csv,
)
from .integrators import finite_difference_derivative, integrate, rhs_cubic, rhs_fhn, solve_burgers, solve_ks
from .networks import NetworkSpec, init, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train, write_history_csv

log = logging.getLogger(__name__)

EXAMPLES = ("fhn", "cubic", "burgers", "ks", "custom")
PDE_EXAMPLES = ("burgers", "ks")
TRUE_RHS = {"fhn": rhs_fhn, "cubic": rhs_cubic}
CHANNELS = {"fhn": ("v", "w"), "cubic": ("x", "y")}

DATA_FILE = "data.csv"
TRAIN_DATA_FILE = "train_data.csv"
CHECKPOINT_FILE = "checkpoint.rkdl"
HISTORY_FILE = "loss_history.csv"
CONFIG_FILE = "config.ini"
RUN_INFO_FILE = "run_info.txt"
REPORT_FILE = "report.txt"
FIELD_FILE = "field_grid.csv"


@dataclass
class ExperimentConfig:
    example: str = "fhn"
    noise: float | None = None
    seed: int = 0
    stride: int = 1
    keep_fraction: float | None = None
    out: str = "runs/fhn"
    data: str | None = None
    # ODE sampling
    points: int = 4000
    t_end: float = 400.0
    x0: tuple = (2.0, 0.0)
    # PDE sampling
    grid: int = 256
    steps: int = 101
    dt: float = 0.1
    domain_lo: float = -8.0
    domain_hi: float = 8.0
    viscosity: float = 0.1
    time_crop: int | None = None
    # networks
    implicit_width: int = 20
    implicit_depth: int = 4
    omega0: float = 30.0
    dynamics_width: int = 20
    dynamics_depth: int = 4
    lr_implicit: float = 5e-4
    lr_dynamics: float = 1e-3
    # loss and optimiser
    lambda_rk: float = 1.0
    lambda_grad: float = 1.0
    epochs: int = 15000
    weight_decay: float = 1e-4
    log_every: int = 500
    # evaluation
    field_resolution: int = 21
    mask_radius: float | None = None
    max_denoise_ratio: float | None = None
    min_field_cosine: float | None = None
    max_field_rel_l2: float | None = None
    max_denoise_rel_l2: float | None = None

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise ValueError(f"unknown example {self.example!r}; choose from {EXAMPLES}")

    @property
    def is_pde(self) -> bool:
        return self.example in PDE_EXAMPLES

    def implicit_spec(self, state_dim: int = 2, n_mu: int = 0) -> NetworkSpec:
        if self.is_pde:
            return NetworkSpec("implicit_sine", 2 + n_mu, 1, self.implicit_width,
                               self.implicit_depth, self.omega0)
        return NetworkSpec("implicit_sine", 1 + n_mu, state_dim, self.implicit_width,
                           self.implicit_depth, self.omega0)

    def dynamics_spec(self, state_dim: int = 2, n_mu: int = 0) -> NetworkSpec:
        if self.is_pde:
            return NetworkSpec("residual_conv1d", 1 + n_mu, 1, self.dynamics_width,
                               self.dynamics_depth)
        return NetworkSpec("residual_mlp", state_dim + n_mu, state_dim, self.dynamics_width,
                           self.dynamics_depth)

    def train_config(self, checkpoint_path=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            lr_implicit=self.lr_implicit,
            lr_dynamics=self.lr_dynamics,
            weight_decay=self.weight_decay,
            weights=LossWeights(self.lambda_rk, self.lambda_grad),
            seed=self.seed,
            log_every=self.log_every,
            checkpoint_path=checkpoint_path,
        )


PRESETS = {
    "fhn": dict(example="fhn", points=4000, t_end=400.0, x0=(2.0, 0.0),
                implicit_width=20, implicit_depth=4, dynamics_width=20, dynamics_depth=4,
                lr_implicit=5e-4, lr_dynamics=1e-3, lambda_rk=1.0, lambda_grad=1.0),
    "cubic": dict(example="cubic", points=2500, t_end=10.0, x0=(2.0, 0.0),
                  implicit_width=20, implicit_depth=4, dynamics_width=20, dynamics_depth=4,
                  lr_implicit=5e-4, lr_dynamics=1e-3, lambda_rk=1.0, lambda_grad=0.05),
    "burgers": dict(example="burgers", grid=256, steps=101, dt=0.1, domain_lo=-8.0,
                    domain_hi=8.0, viscosity=0.1,
                    implicit_width=10, implicit_depth=4, dynamics_width=8, dynamics_depth=4,
                    lr_implicit=5e-4, lr_dynamics=1e-3, lambda_rk=1.0, lambda_grad=1.0),
    "ks": dict(example="ks", grid=1024, steps=251, dt=0.4, domain_lo=0.0,
               domain_hi=32.0 * math.pi,
               implicit_width=50, implicit_depth=4, dynamics_width=16, dynamics_depth=4,
               lr_implicit=5e-4, lr_dynamics=1e-3, lambda_rk=1.0, lambda_grad=1.0),
    "custom": dict(example="custom"),
}


def preset(example: str, **overrides) -> ExperimentConfig:
    if example not in PRESETS:
        raise ValueError(f"unknown example {example!r}; choose from {EXAMPLES}")
    values = {"out": f"runs/{example}", **PRESETS[example], **overrides}
    return ExperimentConfig(**values)


# ---------------------------------------------------------------- config files

SECTIONS = {
    "experiment": ("example", "noise", "seed", "stride", "keep_fraction", "out", "data"),
    "data": ("points", "t_end", "x0", "grid", "steps", "dt", "domain_lo", "domain_hi",
             "viscosity", "time_crop"),
    "networks": ("implicit_width", "implicit_depth", "omega0", "dynamics_width",
                 "dynamics_depth", "lr_implicit", "lr_dynamics"),
    "training": ("lambda_rk", "lambda_grad", "epochs", "weight_decay", "log_every"),
    "evaluation": ("field_resolution", "mask_radius", "max_denoise_ratio", "min_field_cosine",
                   "max_field_rel_l2", "max_denoise_rel_l2"),
}
_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(name: str, text: str):
    text = text.strip()
    kind = _FIELD_TYPES[name]
    if text == "":
        if "None" not in kind:
            raise ValueError(f"config key {name!r} needs a value")
        return None
    if name == "x0":
        return tuple(float(v) for v in text.split(","))
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def config_to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    for section, keys in SECTIONS.items():
        parser[section] = {k: _format_value(getattr(cfg, k)) for k in keys}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(config_to_ini(cfg))


def read_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Values from an INI file layered over ``base`` (or over the file's example preset)."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    values = {}
    known = {k for keys in SECTIONS.values() for k in keys}
    for section in parser.sections():
        for key, text in parser[section].items():
            if key not in known:
                raise ValueError(f"{path}: unknown key {key!r} in section [{section}]")
            values[key] = _parse_value(key, text)
    if base is None:
        base = preset(values.get("example", "fhn"))
    return replace(base, **values)


# ---------------------------------------------------------------- data


def generate_dataset(cfg: ExperimentConfig):
    """Clean reference data for a benchmark example (noisy = clean)."""
    if cfg.example in TRUE_RHS:
        t = np.linspace(0.0, cfg.t_end, cfg.points)
        traj = integrate(TRUE_RHS[cfg.example], cfg.x0, t)
        return TimeSeriesDataset(t, traj.states, traj.states.copy(), CHANNELS[cfg.example])
    if cfg.example not in PDE_EXAMPLES:
        raise ValueError("the custom example has no generator; pass --data")
    length = cfg.domain_hi - cfg.domain_lo
    # solve on >= 256 (Burgers) / 1024 (KS) points, report every factor-th one
    minimum = 256 if cfg.example == "burgers" else 1024
    factor = max(1, math.ceil(minimum / cfg.grid))
    fine = cfg.grid * factor
    z_fine = cfg.domain_lo + length * np.arange(fine) / fine
    times = cfg.dt * np.arange(cfg.steps)
    if cfg.example == "burgers":
        u = solve_burgers(np.exp(-((z_fine + 2.0) ** 2)), times, cfg.viscosity,
                          (cfg.domain_lo, cfg.domain_hi))
    else:
        u0 = np.cos(z_fine / 16.0) * (1.0 + np.sin(z_fine / 16.0))
        u = solve_ks(u0, times, length, substeps=max(1, math.ceil(cfg.dt / 0.1)))
    u = u[:, ::factor]
    if cfg.time_crop is not None:
        times, u = times[: cfg.time_crop], u[: cfg.time_crop]
    return SpatioTemporalDataset(times, z_fine[::factor], u, u.copy(), period=length)


def prepare_training_data(cfg: ExperimentConfig, dataset):
    """Apply the configured noise level and time subsampling."""
    if cfg.noise is not None and dataset.clean is not None:
        dataset = with_noise(dataset, NoiseSpec(cfg.noise, cfg.seed))
    if cfg.stride != 1 or cfg.keep_fraction is not None:
        dataset = subsample(dataset, cfg.stride, cfg.keep_fraction, cfg.seed)
    return dataset


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def data_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data) if cfg.data else Path(cfg.out) / DATA_FILE


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(cfg)
    if cfg.noise:
        ds = with_noise(ds, NoiseSpec(cfg.noise, cfg.seed))
    path = out / DATA_FILE
    write_csv(ds, path)
    log.info("wrote %s", path)
    return path


def _load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run `rkdl generate` first)")
    return read_csv(path)


def _state_dim(ds) -> int:
    return 1 if isinstance(ds, SpatioTemporalDataset) else max(ds.state_index) + 1


def _n_mu(ds) -> int:
    return 0 if ds.mu is None else len(ds.mu)


def cmd_train(cfg: ExperimentConfig):
    source = data_path(cfg)
    dataset = prepare_training_data(cfg, _load(source))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(dataset, out / TRAIN_DATA_FILE)
    write_config(cfg, out / CONFIG_FILE)
    info = {
        "seed": cfg.seed,
        "rkdl": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "dataset": str(source),
        "dataset_sha256": sha256_file(source),
        "train_data_sha256": sha256_file(out / TRAIN_DATA_FILE),
    }
    (out / RUN_INFO_FILE).write_text("".join(f"{k} = {v}\n" for k, v in info.items()))

    dim, n_mu = _state_dim(dataset), _n_mu(dataset)
    result = train([dataset], cfg.implicit_spec(dim, n_mu), cfg.dynamics_spec(dim, n_mu),
                   cfg.train_config(str(out / CHECKPOINT_FILE)))
    save_checkpoint(out / CHECKPOINT_FILE, {"implicit": result.implicit, "dynamics": result.dynamics},
                    _transform_meta(result.transform, cfg, len(result.history)))
    write_history_csv(result.history, out / HISTORY_FILE)
    log.info("trained %d epochs in %.1f s", cfg.epochs, result.seconds)
    return result


def _transform_meta(transform: InputTransform, cfg, epochs):
    return {
        "epoch": epochs,
        "transform_lo": transform.lo.tolist(),
        "transform_hi": transform.hi.tolist(),
        "transform_names": list(transform.names),
        "example": cfg.example,
    }


def _thresholds(cfg, report: EvalReport):
    failures = []
    if cfg.max_denoise_ratio is not None:
        ratio = np.asarray(report.denoise_rmse) / np.asarray(report.noise_sigma)
        if not np.all(ratio <= cfg.max_denoise_ratio):
            failures.append(f"denoise_rmse / noise_sigma = {ratio.tolist()} > {cfg.max_denoise_ratio}")
    if cfg.min_field_cosine is not None and not report.field_cosine >= cfg.min_field_cosine:
        failures.append(f"field_cosine = {report.field_cosine:.6g} < {cfg.min_field_cosine}")
    if cfg.max_field_rel_l2 is not None and not report.field_rel_l2 <= cfg.max_field_rel_l2:
        failures.append(f"field_rel_l2 = {report.field_rel_l2:.6g} > {cfg.max_field_rel_l2}")
    if cfg.max_denoise_rel_l2 is not None and not report.denoise_rel_l2 <= cfg.max_denoise_rel_l2:
        failures.append(f"denoise_rel_l2 = {report.denoise_rel_l2:.6g} > {cfg.max_denoise_rel_l2}")
    return failures


def evaluate_run(cfg: ExperimentConfig, implicit, dynamics, transform, dataset,
                 out: Path | None = None) -> EvalReport:
    """Metrics (and, with ``out``, report files) for trained networks on ``dataset``."""
    start = time.perf_counter()
    rmse = denoise_rmse(implicit, dataset, transform)
    sigma = None
    if cfg.noise is not None:
        axis = None if isinstance(dataset, SpatioTemporalDataset) else -1
        sigma = noise_sigma(dataset.clean, NoiseSpec(cfg.noise), axis).tolist()
    estimate = denoised(implicit, dataset, transform)
    mu = None
    if dataset.mu is not None:
        offset = transform.dim - len(dataset.mu)
        mu = transform.apply(np.r_[transform.lo[:offset], dataset.mu])[offset:]
    report = EvalReport(
        denoise_rmse=rmse.tolist(),
        noise_sigma=sigma,
        denoise_rel_l2=relative_l2(estimate, dataset.clean),
        config={k: _format_value(v) for k, v in vars(cfg).items()},
    )
    if isinstance(dataset, SpatioTemporalDataset):
        fd = finite_difference_derivative(dataset.clean, dataset.times)
        pred = pde_field(dynamics, dataset.clean, mu)
        report.field_rel_l2, report.field_cosine = field_metrics(pred, fd)
        if out is not None:
            for name, values in (("noisy", dataset.noisy), ("denoised", estimate),
                                 ("clean", dataset.clean), ("field_pred", pred),
                                 ("field_fd", fd)):
                export_heatmap(values, out / f"heatmap_{name}.ppm")
    else:
        clean = dataset.clean
        lo, hi = clean.min(axis=0), clean.max(axis=0)
        pad = 0.1 * (hi - lo)
        bounds = list(zip(lo - pad, hi + pad))
        grid = field_grid(dynamics, bounds, cfg.field_resolution, TRUE_RHS.get(cfg.example), mu)
        # a constant trajectory has a zero-size bounding box; fall back to unit radius
        radius = cfg.mask_radius or default_radius(clean) or 1.0
        mask = data_region_mask(grid, clean, radius)
        if grid.true is not None:
            report.field_rel_l2, report.field_cosine = field_metrics(grid.predicted, grid.true, mask)
        if out is not None:
            write_field_csv(grid, mask, out / FIELD_FILE)
            denoised_ds = TimeSeriesDataset(dataset.times, estimate, dataset.clean, dataset.channels)
            write_csv(denoised_ds, out / "denoised.csv")
    report.runtime_seconds = time.perf_counter() - start
    report.failures = _thresholds(cfg, report)
    report.passed = not report.failures
    if out is not None:
        report.write(out / REPORT_FILE)
    return report


def cmd_evaluate(cfg: ExperimentConfig, checkpoint=None) -> EvalReport:
    out = Path(cfg.out)
    ckpt = Path(checkpoint) if checkpoint else out / CHECKPOINT_FILE
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    nets, meta = load_checkpoint(ckpt)
    transform = InputTransform(np.array(meta["transform_lo"]), np.array(meta["transform_hi"]),
                               tuple(meta.get("transform_names", ())))
    data_file = out / TRAIN_DATA_FILE
    dataset = _load(data_file if data_file.exists() else data_path(cfg))
    out.mkdir(parents=True, exist_ok=True)
    return evaluate_run(cfg, nets["implicit"], nets["dynamics"], transform, dataset, out)


def _run_level(args):
    cfg_dict, level, run_dir = args
    cfg = replace(ExperimentConfig(**cfg_dict), noise=level, out=str(run_dir))
    try:
        cmd_train(cfg)
        report = cmd_evaluate(cfg)
        return {"noise_level": level, "denoise_rmse": float(np.mean(report.denoise_rmse)),
                "field_rel_l2": report.field_rel_l2, "field_cosine": report.field_cosine,
                "status": "ok"}
    except Exception as exc:  # recorded in the summary; the sweep goes on
        return {"noise_level": level, "denoise_rmse": float("nan"), "field_rel_l2": float("nan"),
                "field_cosine": float("nan"), "status": f"failed: {type(exc).__name__}: {exc}"}


def max_workers(jobs: int) -> int:
    cap = os.environ.get("RKDL_THREADS")
    if cap:
        jobs = min(jobs, max(1, int(cap)))
    return max(1, jobs)


def dedupe_levels(levels) -> list:
    seen = []
    for level in levels:
        level = float(level)
        if level in seen:
            warnings.warn(f"duplicate noise level {level} ignored", stacklevel=2)
            continue
        seen.append(level)
    if not seen:
        raise ValueError("sweep needs at least one noise level")
    return seen


def cmd_sweep(cfg: ExperimentConfig, levels, jobs: int = 1) -> list:
    levels = dedupe_levels(levels)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    source = data_path(cfg)
    if not source.exists():
        cmd_generate(replace(cfg, noise=None))
        source = out / DATA_FILE
    base = {**vars(cfg), "data": str(source)}
    tasks = [(base, level, out / f"noise_{level:g}") for level in levels]
    workers = max_workers(jobs)
    if workers == 1:
        rows = [_run_level(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_level, tasks))
    with (out / "summary.csv").open("w") as fh:
        fh.write("noise_level,denoise_rmse,field_rel_l2,field_cosine,status\n")
        for r in rows:
            status = r["status"].replace(",", ";").replace("\n", " ")
            fh.write(f"{r['noise_level']:g},{r['denoise_rmse']:.10g},{r['field_rel_l2']:.10g},"
                     f"{r['field_cosine']:.10g},{status}\n")
    return rows


def gradcheck_problem(cfg: ExperimentConfig, width=8, depth=2, samples=16, seed=0):
    """Tiny networks on benchmark-shaped data, for end-to-end gradient checks."""
    if cfg.is_pde:
        times = cfg.dt * np.arange(6)
        grid = np.linspace(cfg.domain_lo, cfg.domain_hi, 8, endpoint=False)
        u = np.exp(-((grid[None, :] + 2.0) ** 2)) * np.exp(-0.1 * times[:, None])
        ds = SpatioTemporalDataset(times, grid, u + 0.01 * np.sin(7 * grid), u)
    else:
        rhs = TRUE_RHS.get(cfg.example, rhs_fhn)
        t = np.linspace(0.0, 0.1 * (samples - 1), samples)
        clean = integrate(rhs, cfg.x0, t, substeps=10).states
        ds = with_noise(TimeSeriesDataset(t, clean, clean), NoiseSpec(0.1, seed))
    small = replace(cfg, implicit_width=width, implicit_depth=depth,
                    dynamics_width=width, dynamics_depth=depth)
    dim = _state_dim(ds)
    return ds, small.implicit_spec(dim), small.dynamics_spec(dim)


def cmd_gradcheck(cfg: ExperimentConfig, fd_step=1e-6, seed=0) -> float:
    ds, i_spec, d_spec = gradcheck_problem(cfg, seed=seed)
    implicit, dynamics = init(i_spec, seed), init(d_spec, seed + 1)
    transform = build_transform(ds)
    weights = LossWeights(cfg.lambda_rk, cfg.lambda_grad)
    params = {**{"implicit." + k: v for k, v in implicit.trainable().items()},
              **{"dynamics." + k: v for k, v in dynamics.trainable().items()}}
    mode = "pde" if cfg.is_pde else "ode"

    def loss(p):
        ip = {**implicit.tensors, **{k[9:]: v for k, v in p.items() if k.startswith("implicit.")}}
        dp = {**dynamics.tensors, **{k[9:]: v for k, v in p.items() if k.startswith("dynamics.")}}
        return total_loss([ds], (i_spec, ip), (d_spec, dp), weights, transform, mode=mode).total

    return ad.gradient_check(loss, params, fd_step)
