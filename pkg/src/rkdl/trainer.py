"""Joint Adam training of the implicit and dynamics networks."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .constraint_loss import LossWeights, total_loss
from .dataset import InputTransform, SpatioTemporalDataset, TimeSeriesDataset, build_transform
from .networks import NetworkSpec, ParameterSet, init, save_checkpoint

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "mse", "rk", "grad", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, last_finite):
        self.epoch = epoch
        self.last_finite = last_finite
        super().__init__(f"loss became non-finite at epoch {epoch}; last finite: {last_finite}")


@dataclass
class TrainConfig:
    epochs: int = 15000
    lr_implicit: float = 5e-4
    lr_dynamics: float = 1e-3
    weight_decay: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    log_every: int = 500
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not (self.lr_implicit > 0 and self.lr_dynamics > 0):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """Bias-corrected Adam on ``grads + weight_decay * params``.

    Returns new parameter arrays; ``state`` is updated in place and returned.
    """
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        if weight_decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        out[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return out, state


@dataclass
class TrainResult:
    implicit: ParameterSet
    dynamics: ParameterSet
    history: list
    transform: InputTransform
    seconds: float = 0.0


def _mode_of(datasets):
    return "pde" if isinstance(datasets[0], SpatioTemporalDataset) else "ode"


def evaluate_loss(datasets, implicit: ParameterSet, dynamics: ParameterSet,
                  weights: LossWeights, transform: InputTransform, tape=None,
                  bn_updates=None):
    """Loss breakdown; with a ``tape`` the trainable arrays become leaves."""
    if tape is not None:
        i_params = implicit.bind(tape, "implicit.")
        d_params = dynamics.bind(tape, "dynamics.")
    else:
        i_params, d_params = implicit.tensors, dynamics.tensors
    return total_loss(
        datasets, (implicit.spec, i_params), (dynamics.spec, d_params), weights, transform,
        mode=_mode_of(datasets), bn_updates=bn_updates,
    )


def train(datasets: Sequence, implicit_spec: NetworkSpec, dynamics_spec: NetworkSpec,
          config: TrainConfig, transform: InputTransform | None = None,
          initial: tuple[ParameterSet, ParameterSet] | None = None,
          callback: Callable | None = None) -> TrainResult:
    """Full-batch training: one Adam step per epoch over every sample.

    The history row for epoch ``e`` holds the loss evaluated just before the
    ``e``-th update; ``epochs=0`` yields a single row for the initial loss.
    """
    if isinstance(datasets, (TimeSeriesDataset, SpatioTemporalDataset)):
        datasets = [datasets]
    datasets = list(datasets)
    transform = transform or build_transform(datasets)
    if initial is None:
        implicit = init(implicit_spec, config.seed)
        dynamics = init(dynamics_spec, config.seed + 1)
    else:
        implicit, dynamics = initial
    states = {"implicit": AdamState(), "dynamics": AdamState()}
    lrs = {"implicit": config.lr_implicit, "dynamics": config.lr_dynamics}
    history = []
    last = None
    start = time.perf_counter()

    def checkpoint(epoch):
        if config.checkpoint_path:
            save_checkpoint(
                config.checkpoint_path, {"implicit": implicit, "dynamics": dynamics},
                {"epoch": epoch, "transform_lo": transform.lo.tolist(),
                 "transform_hi": transform.hi.tolist(), "transform_names": list(transform.names)},
            )

    if config.epochs == 0:
        br = evaluate_loss(datasets, implicit, dynamics, config.weights, transform)
        history.append({"epoch": 0, **br.as_floats()})
        checkpoint(0)
        return TrainResult(implicit, dynamics, history, transform, time.perf_counter() - start)

    for epoch in range(1, config.epochs + 1):
        tape = ad.Tape()
        bn_updates: dict = {}
        br = evaluate_loss(datasets, implicit, dynamics, config.weights, transform,
                           tape=tape, bn_updates=bn_updates)
        row = {"epoch": epoch, **br.as_floats()}
        if not all(np.isfinite(v) for v in row.values()):
            raise TrainingDiverged(epoch, last)
        grads = ad.backward(br.total)
        new_params = {}
        for net_name, ps in (("implicit", implicit), ("dynamics", dynamics)):
            prefix = net_name + "."
            g = {k[len(prefix):]: v for k, v in grads.items() if k.startswith(prefix)}
            new_params[net_name], _ = adam_step(
                ps.trainable(), g, states[net_name], lrs[net_name], config.weight_decay
            )
        implicit = implicit.updated(new_params["implicit"])
        dynamics = dynamics.updated({**new_params["dynamics"], **bn_updates})
        history.append(row)
        last = row
        if callback is not None:
            callback(epoch, row)
        if config.log_every and (epoch % config.log_every == 0 or epoch == config.epochs):
            log.info("epoch %d  mse %.4e  rk %.4e  grad %.4e  total %.4e",
                     epoch, row["mse"], row["rk"], row["grad"], row["total"])
            checkpoint(epoch)
    return TrainResult(implicit, dynamics, history, transform, time.perf_counter() - start)


def write_history_csv(history, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [f"{row[k]:.17g}" for k in HISTORY_COLUMNS[1:]])


def read_history_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            {"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_COLUMNS[1:]}}
            for r in reader
        ]
