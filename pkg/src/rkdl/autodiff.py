"""Small tape-based differentiation engine on top of numpy.

Reverse mode is provided by :class:`Tape` / :func:`backward`.  Forward-mode
tangents with respect to a network input are carried by :class:`DualTensor`,
whose primal and tangent parts are both ordinary tape nodes.  Because the
tangent is itself recorded, a loss that contains ``d x / d t`` can be
differentiated with respect to the parameters (forward-over-reverse).

Every primitive accepts either :class:`Tensor` operands or plain arrays.  When
no operand is a :class:`Tensor` the primitive evaluates eagerly and returns a
numpy array, which makes parameter-free evaluation (and finite-difference
checks) cheap.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "DualTensor",
    "add",
    "sub",
    "mul",
    "scale",
    "linear",
    "activation",
    "sine",
    "cosine",
    "elu",
    "elu_prime",
    "identity",
    "square",
    "tsum",
    "mean",
    "batch_norm",
    "conv1d_periodic",
    "reshape",
    "concat",
    "forward_tangent",
    "backward",
    "gradient_check",
    "value_of",
]


class Tape:
    """Append-only record of primitive evaluations."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, name: str, value) -> "Tensor":
        """Register a parameter leaf; gradients are reported under ``name``."""
        if name in self.leaves:
            raise ValueError(f"duplicate parameter leaf {name!r}")
        node = self.record(np.array(value, dtype=np.float64), (), ())
        node.name = name
        self.leaves[name] = node
        return node

    def record(self, data, parents, vjps) -> "Tensor":
        node = Tensor(data, self, len(self.nodes), parents, vjps)
        self.nodes.append(node)
        return node


class Tensor:
    """A tape node: a float64 array plus the recipe for its vector-Jacobian product."""

    __slots__ = ("data", "tape", "index", "parents", "vjps", "name")

    def __init__(self, data, tape, index, parents, vjps):
        self.data = data
        self.tape = tape
        self.index = index
        self.parents = parents
        self.vjps = vjps
        self.name = None

    # numpy ufuncs refuse tape nodes; ndarray binops defer to the reflected method
    __array_ufunc__ = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (Tensor, DualTensor)):
            raise TypeError("division by a tape node is not a registered primitive")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def value_of(x) -> np.ndarray:
    """Primal array of a Tensor, DualTensor or array-like."""
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, DualTensor):
        return value_of(x.primal)
    return np.asarray(x, dtype=np.float64)


def _record(data, pairs):
    """Attach ``data`` to the tape of the Tensor operands in ``pairs``.

    ``pairs`` holds ``(operand, vjp)`` tuples; non-Tensor operands are skipped.
    With no Tensor operand the raw array is returned.
    """
    parents = []
    vjps = []
    tape = None
    for operand, vjp in pairs:
        if isinstance(operand, Tensor):
            if tape is None:
                tape = operand.tape
            elif operand.tape is not tape:
                raise ValueError("operands belong to different tapes")
            parents.append(operand)
            vjps.append(vjp)
    if tape is None:
        return data
    return tape.record(data, tuple(parents), tuple(vjps))


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    if isinstance(a, DualTensor) or isinstance(b, DualTensor):
        return DualTensor.lift(a) + DualTensor.lift(b)
    x, y = value_of(a), value_of(b)
    _check_broadcast(x, y, "add")
    return _record(
        x + y,
        [(a, lambda g: _unbroadcast(g, x.shape)), (b, lambda g: _unbroadcast(g, y.shape))],
    )


def sub(a, b):
    if isinstance(a, DualTensor) or isinstance(b, DualTensor):
        return DualTensor.lift(a) - DualTensor.lift(b)
    x, y = value_of(a), value_of(b)
    _check_broadcast(x, y, "sub")
    return _record(
        x - y,
        [(a, lambda g: _unbroadcast(g, x.shape)), (b, lambda g: -_unbroadcast(g, y.shape))],
    )


def mul(a, b):
    if isinstance(a, DualTensor) or isinstance(b, DualTensor):
        return DualTensor.lift(a) * DualTensor.lift(b)
    x, y = value_of(a), value_of(b)
    _check_broadcast(x, y, "mul")
    return _record(
        x * y,
        [(a, lambda g: _unbroadcast(g * y, x.shape)), (b, lambda g: _unbroadcast(g * x, y.shape))],
    )


def scale(a, c: float):
    """Multiply by a Python scalar."""
    if isinstance(a, DualTensor):
        return DualTensor(scale(a.primal, c), scale(a.tangent, c))
    c = float(c)
    return _record(value_of(a) * c, [(a, lambda g: g * c)])


def square(a):
    if isinstance(a, DualTensor):
        return DualTensor(square(a.primal), scale(mul(a.primal, a.tangent), 2.0))
    x = value_of(a)
    return _record(x * x, [(a, lambda g: 2.0 * g * x)])


def identity(a):
    if isinstance(a, DualTensor):
        return DualTensor(identity(a.primal), identity(a.tangent))
    return _record(value_of(a).copy(), [(a, lambda g: g)])


def sine(a):
    x = value_of(a)
    return _record(np.sin(x), [(a, lambda g: g * np.cos(x))])


def cosine(a):
    x = value_of(a)
    return _record(np.cos(x), [(a, lambda g: -g * np.sin(x))])


def elu(a):
    x = value_of(a)
    neg = np.minimum(x, 0.0)
    out = np.where(x >= 0.0, x, np.expm1(neg))
    slope = np.where(x >= 0.0, 1.0, np.exp(neg))
    return _record(out, [(a, lambda g: g * slope)])


def elu_prime(a):
    """Derivative of :func:`elu`; needed to propagate tangents through ELU layers."""
    x = value_of(a)
    neg = np.minimum(x, 0.0)
    out = np.where(x >= 0.0, 1.0, np.exp(neg))
    curvature = np.where(x >= 0.0, 0.0, out)
    return _record(out, [(a, lambda g: g * curvature)])


_ACTIVATIONS = {
    "sine": (sine, cosine),
    "elu": (elu, elu_prime),
}


def activation(kind: str, z):
    """Elementwise activation ``kind`` in {sine, elu, identity}; accepts DualTensor."""
    if kind == "identity":
        return identity(z)
    try:
        fn, deriv = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unsupported activation {kind!r}") from None
    if isinstance(z, DualTensor):
        return DualTensor(fn(z.primal), mul(deriv(z.primal), z.tangent))
    return fn(z)


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None):
    if isinstance(a, DualTensor):
        return DualTensor(tsum(a.primal, axis), tsum(a.tangent, axis))
    x = value_of(a)
    out = x.sum(axis=axis)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.shape).copy()

    return _record(np.asarray(out, dtype=np.float64), [(a, vjp)])


def mean(a, axis=None):
    x = value_of(a)
    count = x.size if axis is None else np.prod([x.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / count)


# ---------------------------------------------------------------- structure


def reshape(a, shape):
    if isinstance(a, DualTensor):
        return DualTensor(reshape(a.primal, shape), reshape(a.tangent, shape))
    x = value_of(a)
    return _record(x.reshape(shape), [(a, lambda g: g.reshape(x.shape))])


def take(a, index):
    if isinstance(a, DualTensor):
        return DualTensor(take(a.primal, index), take(a.tangent, index))
    x = value_of(a)

    def vjp(g):
        out = np.zeros_like(x)
        np.add.at(out, index, g)
        return out

    return _record(x[index], [(a, vjp)])


def concat(parts, axis=-1):
    if any(isinstance(p, DualTensor) for p in parts):
        duals = [DualTensor.lift(p) for p in parts]
        return DualTensor(
            concat([d.primal for d in duals], axis), concat([d.tangent for d in duals], axis)
        )
    arrays = [value_of(p) for p in parts]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([0] + [arr.shape[axis] for arr in arrays])
    pairs = []
    for i, p in enumerate(parts):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        pairs.append((p, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return _record(out, pairs)


# ---------------------------------------------------------------- layers


def linear(W, b, z):
    """Affine map ``z @ W.T + b`` for ``z`` of shape (n,) or (batch, n).

    ``b`` may be None.  A DualTensor ``z`` yields a DualTensor whose tangent is
    ``W`` applied to the input tangent (no bias).
    """
    if isinstance(z, DualTensor):
        return DualTensor(linear(W, b, z.primal), linear(W, None, z.tangent))
    w, x = value_of(W), value_of(z)
    if w.ndim != 2:
        raise ValueError(f"linear: weight must be 2-D, got shape {w.shape}")
    if x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ValueError(
            f"linear: input shape {x.shape} does not conform to weight shape {w.shape}"
        )
    out = x @ w.T
    pairs = [
        (W, lambda g: np.outer(g, x) if x.ndim == 1 else g.T @ x),
        (z, lambda g: g @ w),
    ]
    if b is not None:
        bias = value_of(b)
        if bias.shape != (w.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({w.shape[0]},)")
        out = out + bias
        pairs.append((b, lambda g: g if g.ndim == 1 else g.sum(axis=0)))
    return _record(out, pairs)


def conv1d_periodic(x, W, b=None):
    """Periodic 1-D convolution.

    ``x`` is (batch, c_in, S), ``W`` is (c_out, c_in, k) with odd ``k``; output
    ``out[:, o, s] = b[o] + sum_{c,j} W[o, c, j] * x[:, c, (s + j - k//2) mod S]``.
    """
    xv, w = value_of(x), value_of(W)
    if xv.ndim != 3 or w.ndim != 3 or xv.shape[1] != w.shape[1] or w.shape[2] % 2 != 1:
        raise ValueError(
            f"conv1d_periodic: input {xv.shape} incompatible with kernel {w.shape}"
        )
    pad = w.shape[2] // 2
    shifts = [pad - j for j in range(w.shape[2])]
    shifted = [np.roll(xv, s, axis=-1) for s in shifts]
    out = np.matmul(w[:, :, 0], shifted[0])
    for j in range(1, w.shape[2]):
        out = out + np.matmul(w[:, :, j], shifted[j])

    def vjp_x(g):
        total = np.roll(np.matmul(w[:, :, 0].T, g), -shifts[0], axis=-1)
        for j in range(1, w.shape[2]):
            total = total + np.roll(np.matmul(w[:, :, j].T, g), -shifts[j], axis=-1)
        return total

    def vjp_w(g):
        return np.stack(
            [np.tensordot(g, sh, axes=([0, 2], [0, 2])) for sh in shifted], axis=-1
        )

    pairs = [(x, vjp_x), (W, vjp_w)]
    if b is not None:
        bias = value_of(b)
        out = out + bias[None, :, None]
        pairs.append((b, lambda g: g.sum(axis=(0, 2))))
    return _record(out, pairs)


def batch_norm(x, gamma, beta, running_mean, running_var, mode="train",
               eps=1e-5, momentum=0.1):
    """Per-channel batch normalisation over every axis except axis 1.

    Returns ``(out, new_running_mean, new_running_var)``.  In eval mode the
    running statistics are used and returned unchanged.  Running variance is
    updated with the biased batch variance.
    """
    xv = value_of(x)
    if xv.ndim < 2:
        raise ValueError(f"batch_norm: expected (batch, channels, ...), got {xv.shape}")
    axes = tuple(i for i in range(xv.ndim) if i != 1)
    bshape = [1] * xv.ndim
    bshape[1] = xv.shape[1]
    g_ = value_of(gamma).reshape(bshape)
    running_mean = np.asarray(running_mean, dtype=np.float64)
    running_var = np.asarray(running_var, dtype=np.float64)

    if mode == "train":
        n = xv.size // xv.shape[1]
        if n < 2:
            raise ValueError("batch_norm: train mode needs at least 2 elements per channel")
        mu = xv.mean(axis=axes, keepdims=True)
        var = xv.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mu) * inv

        def vjp_x(g):
            gh = g * g_
            return inv / n * (
                n * gh
                - gh.sum(axis=axes, keepdims=True)
                - xhat * (gh * xhat).sum(axis=axes, keepdims=True)
            )

        new_mean = (1.0 - momentum) * running_mean + momentum * mu.reshape(-1)
        new_var = (1.0 - momentum) * running_var + momentum * var.reshape(-1)
    elif mode == "eval":
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (xv - running_mean.reshape(bshape)) * inv

        def vjp_x(g):
            return g * g_ * inv

        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"batch_norm: unknown mode {mode!r}")

    out = xhat * g_ + value_of(beta).reshape(bshape)
    node = _record(
        out,
        [
            (x, vjp_x),
            (gamma, lambda g: (g * xhat).sum(axis=axes)),
            (beta, lambda g: g.sum(axis=axes)),
        ],
    )
    return node, new_mean, new_var


# ---------------------------------------------------------------- forward mode


class DualTensor:
    """Primal value and its tangent with respect to one input direction.

    Both parts are tape nodes (or constant arrays), so anything built from the
    tangent remains differentiable by :func:`backward`.
    """

    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        if value_of(primal).shape != value_of(tangent).shape:
            raise ValueError(
                f"primal shape {value_of(primal).shape} != tangent shape "
                f"{value_of(tangent).shape}"
            )
        self.primal = primal
        self.tangent = tangent

    __array_ufunc__ = None

    @staticmethod
    def lift(x) -> "DualTensor":
        if isinstance(x, DualTensor):
            return x
        return DualTensor(x, np.zeros_like(value_of(x)))

    @property
    def shape(self):
        return value_of(self.primal).shape

    def __add__(self, other):
        other = DualTensor.lift(other)
        return DualTensor(add(self.primal, other.primal), add(self.tangent, other.tangent))

    __radd__ = __add__

    def __sub__(self, other):
        other = DualTensor.lift(other)
        return DualTensor(sub(self.primal, other.primal), sub(self.tangent, other.tangent))

    def __rsub__(self, other):
        return DualTensor.lift(other) - self

    def __mul__(self, other):
        if not isinstance(other, DualTensor):
            return DualTensor(mul(self.primal, other), mul(self.tangent, other))
        return DualTensor(
            mul(self.primal, other.primal),
            add(mul(self.tangent, other.primal), mul(self.primal, other.tangent)),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def forward_tangent(fn: Callable, at, direction=None) -> DualTensor:
    """Evaluate ``fn`` on a dual input seeded with ``direction`` (default ones).

    ``fn`` must be built from the primitives of this module; any other numpy
    operation on the dual input raises ``TypeError``.
    """
    primal = np.asarray(at, dtype=np.float64)
    if direction is None:
        direction = np.ones_like(primal)
    out = fn(DualTensor(primal, np.broadcast_to(np.asarray(direction, np.float64), primal.shape)))
    if not isinstance(out, DualTensor):
        out = DualTensor.lift(out)
    return out


# ---------------------------------------------------------------- reverse mode


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar tape node with respect to every parameter leaf.

    Leaves that do not influence ``loss`` receive zero arrays.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor recorded on a tape")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    grads: list = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.data)
    nodes = tape.nodes
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.parents:
            grads[i] = None
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            j = parent.index
            grads[j] = contrib if grads[j] is None else grads[j] + contrib
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads[leaf.index] if leaf.index <= loss.index else None
        out[name] = np.zeros_like(leaf.data) if g is None else np.asarray(g).reshape(leaf.shape)
    return out


def gradient_check(f: Callable[[Mapping], object], params: Mapping[str, np.ndarray],
                   fd_step: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of parameters (Tensors on a tape, or plain arrays) to a
    scalar.  Error per entry is ``|a - fd| / max(|a|, |fd|, 1e-12)``.
    """
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    tape = Tape()
    leaves = {k: tape.leaf(k, v) for k, v in params.items()}
    loss = f(leaves)
    if not np.isfinite(value_of(loss)).all():
        raise FloatingPointError("function value is not finite")
    analytic = backward(loss) if isinstance(loss, Tensor) else {
        k: np.zeros_like(np.asarray(v, dtype=np.float64)) for k, v in params.items()
    }

    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    worst = 0.0
    for name, value in base.items():
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            f_plus = float(value_of(f(base)))
            flat[i] = orig - fd_step
            f_minus = float(value_of(f(base)))
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite function value perturbing {name}[{i}]")
            fd = (f_plus - f_minus) / (2.0 * fd_step)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-12)
            worst = max(worst, err)
    return worst
