"""Implicit (sinusoidal) and dynamics (residual MLP / residual 1-D CNN) networks.

Networks are plain functions of a :class:`ParameterSet`; binding the set to a
:class:`~rkdl.autodiff.Tape` turns its trainable arrays into parameter leaves.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

KINDS = ("implicit_sine", "residual_mlp", "residual_conv1d")
KERNEL = 3
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ExtrapolationWarning(UserWarning):
    """Implicit network evaluated outside the normalised training range."""


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    input_dim: int
    output_dim: int
    width: int
    depth: int
    omega0: float = 30.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.omega0 > 0:
            raise ValueError("omega0 must be positive")


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Named arrays of one network.  ``buffers`` name the non-trainable entries."""

    spec: NetworkSpec
    tensors: dict
    buffers: tuple = ()

    def trainable(self) -> dict:
        return {k: v for k, v in self.tensors.items() if k not in self.buffers}

    def count(self, include_buffers=False) -> int:
        return sum(
            v.size for k, v in self.tensors.items() if include_buffers or k not in self.buffers
        )

    def bind(self, tape: ad.Tape, prefix: str = "") -> dict:
        """Mapping with tape leaves (named ``prefix + name``) for trainable entries."""
        return {
            k: v if k in self.buffers else tape.leaf(prefix + k, v)
            for k, v in self.tensors.items()
        }

    def updated(self, values: Mapping[str, np.ndarray]) -> "ParameterSet":
        tensors = dict(self.tensors)
        for k, v in values.items():
            if k not in tensors:
                raise KeyError(k)
            tensors[k] = np.asarray(v, dtype=np.float64)
        return ParameterSet(self.spec, tensors, self.buffers)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()


def _tensors(params):
    return params.tensors if isinstance(params, ParameterSet) else params


# ---------------------------------------------------------------- init


def layer_shapes(spec: NetworkSpec) -> dict:
    """Name -> shape for every array of ``spec`` (trainable and buffers)."""
    w, d = spec.width, spec.depth
    shapes = {}
    if spec.kind == "implicit_sine":
        n_in = spec.input_dim
        for i in range(d):
            shapes[f"sine{i}.weight"] = (w, n_in)
            shapes[f"sine{i}.bias"] = (w,)
            n_in = w
        shapes["out.weight"] = (spec.output_dim, w)
        shapes["out.bias"] = (spec.output_dim,)
    elif spec.kind == "residual_mlp":
        shapes["lift.weight"] = (w, spec.input_dim)
        shapes["lift.bias"] = (w,)
        for i in range(d):
            for j in (1, 2):
                shapes[f"block{i}.fc{j}.weight"] = (w, w)
                shapes[f"block{i}.fc{j}.bias"] = (w,)
        shapes["head.weight"] = (spec.output_dim, w)
        shapes["head.bias"] = (spec.output_dim,)
    else:
        shapes["lift.weight"] = (w, spec.input_dim, KERNEL)
        shapes["lift.bias"] = (w,)
        for i in range(d):
            for j in (1, 2):
                # no conv bias: the following batch norm removes it
                shapes[f"block{i}.conv{j}.weight"] = (w, w, KERNEL)
                for s in ("weight", "bias", "running_mean", "running_var"):
                    shapes[f"block{i}.bn{j}.{s}"] = (w,)
        shapes["head.weight"] = (spec.output_dim, w, KERNEL)
        shapes["head.bias"] = (spec.output_dim,)
    return shapes


def init(spec: NetworkSpec, seed: int = 0) -> ParameterSet:
    """Random parameters for ``spec``.

    Sinusoidal nets: first layer U(-1/n_in, 1/n_in), later layers
    U(-sqrt(6/n_in)/omega0, sqrt(6/n_in)/omega0).  Residual nets: U(-1/sqrt(fan_in),
    1/sqrt(fan_in)) for weights and biases; batch-norm scale 1, shift 0, running
    mean 0, running variance 1.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    buffers = []
    for name, shape in layer_shapes(spec).items():
        if ".bn" in name:
            field = name.rsplit(".", 1)[1]
            fill = 1.0 if field in ("weight", "running_var") else 0.0
            tensors[name] = np.full(shape, fill)
            if field.startswith("running"):
                buffers.append(name)
            continue
        layer = name.rsplit(".", 1)[0]
        w_shape = layer_shapes(spec)[layer + ".weight"]
        fan_in = int(np.prod(w_shape[1:]))
        if spec.kind == "implicit_sine" and name.endswith(".weight"):
            bound = 1.0 / fan_in if layer == "sine0" else np.sqrt(6.0 / fan_in) / spec.omega0
        else:
            bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ParameterSet(spec, tensors, tuple(buffers))


# ---------------------------------------------------------------- implicit net


def _as_inputs(inputs, dim):
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dim == 1 else arr.reshape(1, -1)
    if arr.shape[1] != dim:
        raise ValueError(f"implicit network expects {dim} input coordinates, got {arr.shape[1]}")
    if np.any(np.abs(arr) > 1.5):
        warnings.warn("implicit network input outside [-1.5, 1.5]", ExtrapolationWarning,
                      stacklevel=3)
    return arr


def _implicit_layers(p, spec, h):
    for i in range(spec.depth):
        z = ad.linear(p[f"sine{i}.weight"], p[f"sine{i}.bias"], h)
        h = ad.activation("sine", ad.scale(z, spec.omega0))
    return ad.linear(p["out.weight"], p["out.bias"], h)


def implicit_forward(params, spec: NetworkSpec, inputs):
    """State estimate at normalised coordinates ``inputs`` (M x input_dim).

    Every sine layer computes ``sin(omega0 * (W h + b))``; the last layer is linear.
    """
    return _implicit_layers(_tensors(params), spec, _as_inputs(inputs, spec.input_dim))


def implicit_forward_tangent(params, spec: NetworkSpec, inputs, time_jacobian: float = 1.0):
    """``(x, dx/dt)`` where coordinate 0 of ``inputs`` is normalised time.

    ``time_jacobian`` is d(normalised t)/dt, so the returned tangent is in the
    original time units.
    """
    p = _tensors(params)
    arr = _as_inputs(inputs, spec.input_dim)
    direction = np.zeros_like(arr)
    direction[:, 0] = time_jacobian
    out = ad.forward_tangent(lambda z: _implicit_layers(p, spec, z), arr, direction)
    return out.primal, out.tangent


# ---------------------------------------------------------------- dynamics nets


def _bn(p, name, h, mode, bn_updates):
    stats = bn_updates if bn_updates is not None else {}
    rm = stats.get(f"{name}.running_mean", p[f"{name}.running_mean"])
    rv = stats.get(f"{name}.running_var", p[f"{name}.running_var"])
    out, new_mean, new_var = ad.batch_norm(
        h, p[f"{name}.weight"], p[f"{name}.bias"], rm, rv, mode=mode,
        eps=BN_EPS, momentum=BN_MOMENTUM,
    )
    if bn_updates is not None and mode == "train":
        bn_updates[f"{name}.running_mean"] = new_mean
        bn_updates[f"{name}.running_var"] = new_var
    return out


def dynamics_forward(params, spec: NetworkSpec, x, mu=None, mode: str = "train",
                     bn_updates: dict | None = None):
    """Vector-field estimate at state ``x``.

    ``residual_mlp``: ``x`` is (batch, n) or (n,).  ``residual_conv1d``: ``x`` is
    (batch, channels, S) or (batch, S) for a single channel; the output has the
    same layout.  ``mu`` is appended as extra input features (constant extra
    channels for the convolutional net).  ``mode`` selects batch statistics
    ("train") or running statistics ("eval"); in train mode, updated running
    statistics are written into ``bn_updates`` when given.
    """
    p = _tensors(params)
    if spec.kind == "residual_mlp":
        single = ad.value_of(x).ndim == 1
        h = ad.reshape(x, (1, -1)) if single else x
        if ad.value_of(h).ndim != 2:
            raise ValueError(f"residual_mlp expects (batch, n) input, got {ad.value_of(x).shape}")
        if mu is not None:
            mu_cols = np.broadcast_to(np.asarray(mu, np.float64), (ad.value_of(h).shape[0], len(mu)))
            h = ad.concat([h, mu_cols], axis=1)
        if ad.value_of(h).shape[1] != spec.input_dim:
            raise ValueError(
                f"residual_mlp expects {spec.input_dim} input features, got {ad.value_of(h).shape[1]}"
            )
        h = ad.linear(p["lift.weight"], p["lift.bias"], h)
        for i in range(spec.depth):
            r = ad.activation("elu", ad.linear(p[f"block{i}.fc1.weight"], p[f"block{i}.fc1.bias"], h))
            h = h + ad.linear(p[f"block{i}.fc2.weight"], p[f"block{i}.fc2.bias"], r)
        out = ad.linear(p["head.weight"], p["head.bias"], h)
        return ad.reshape(out, (-1,)) if single else out

    if spec.kind != "residual_conv1d":
        raise ValueError(f"{spec.kind!r} is not a dynamics network")
    shape = ad.value_of(x).shape
    squeeze = len(shape) == 2
    h = ad.reshape(x, (shape[0], 1, shape[1])) if squeeze else x
    if len(ad.value_of(h).shape) != 3:
        raise ValueError(f"residual_conv1d expects (batch, [channels,] S) input, got {shape}")
    if mu is not None:
        b, _, s = ad.value_of(h).shape
        mu_ch = np.broadcast_to(np.asarray(mu, np.float64)[None, :, None], (b, len(mu), s))
        h = ad.concat([h, mu_ch], axis=1)
    if ad.value_of(h).shape[1] != spec.input_dim:
        raise ValueError(
            f"residual_conv1d expects {spec.input_dim} channels, got {ad.value_of(h).shape[1]}"
        )
    h = ad.conv1d_periodic(h, p["lift.weight"], p["lift.bias"])
    for i in range(spec.depth):
        r = ad.conv1d_periodic(h, p[f"block{i}.conv1.weight"])
        r = ad.activation("elu", _bn(p, f"block{i}.bn1", r, mode, bn_updates))
        r = ad.conv1d_periodic(r, p[f"block{i}.conv2.weight"])
        h = h + _bn(p, f"block{i}.bn2", r, mode, bn_updates)
    out = ad.conv1d_periodic(h, p["head.weight"], p["head.bias"])
    if squeeze and spec.output_dim == 1:
        return ad.reshape(out, shape)
    return out


# ---------------------------------------------------------------- checkpoints

MAGIC = b"RKDLCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path, networks: Mapping[str, ParameterSet], meta: Mapping | None = None):
    """Write named parameter sets plus free-form metadata (layout in README)."""
    header = {"networks": {}, "meta": dict(meta or {})}
    chunks = []
    offset = 0
    for net_name, ps in networks.items():
        entries = []
        for name, arr in ps.tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entries.append({
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "buffer": name in ps.buffers,
            })
            chunks.append(data)
            offset += len(data)
        header["networks"][net_name] = {"spec": asdict(ps.spec), "tensors": entries}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    """Return ``(networks, meta)`` as written by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20 : 20 + n].decode("utf-8"))
    payload = memoryview(raw)[20 + n :]
    networks = {}
    for net_name, entry in header["networks"].items():
        spec = NetworkSpec(**entry["spec"])
        tensors = {}
        buffers = []
        for t in entry["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=t["offset"])
            tensors[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
            if t["buffer"]:
                buffers.append(t["name"])
        networks[net_name] = ParameterSet(spec, tensors, tuple(buffers))
    return networks, header["meta"]
