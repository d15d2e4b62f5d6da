"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model computation in this package runs through the ops defined here.
The design is deliberately small: eager numpy forward passes, a closure per
op for the backward pass, and a :class:`Tape` that replays the recorded ops
in reverse topological order. Everything is 64-bit so gradient checks
against finite differences can be tight.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import CheckpointError, ShapeError, TrainingError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    ``requires_grad`` marks leaves that should accumulate gradients; outputs
    of ops inherit it from their inputs. ``grad`` stays ``None`` until a
    backward pass deposits something, so a tensor that never influences the
    loss keeps a ``None`` gradient (read it through :meth:`grad_array` to get
    explicit zeros).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], tuple] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> Array:
        return self.data

    def grad_array(self) -> Array:
        """Gradient as an array; exact zeros if nothing reached this tensor."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into ``grad`` of leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        Tape(self).backward()

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    # convenience method forms

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self, axes=None):
        return transpose(self, axes)


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _from_op(data: Array, parents: Sequence[Tensor], backward_fn: Callable[[Array], tuple]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Construction walks the op graph iteratively (no recursion limits) and
    stores every node with parents before children; ``backward`` replays the
    record once in reverse, accumulating gradients additively across fan-out.
    A tape belongs to the thread that built it; parameter tensors may be
    read concurrently, but only one owner may run backward/optimizer steps.
    """

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order  # parents precede children

    def backward(self, seed: Array | None = None) -> None:
        root = self.root
        if seed is None:
            seed = np.ones_like(root.data)
        root.grad = seed if root.grad is None else root.grad + seed
        for node in reversed(self.nodes):
            if node._backward_fn is None or node.grad is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce ``grad`` back down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_data(a: Tensor, b: Tensor, op_name: str) -> tuple[Array, Array]:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op_name}: shapes {a.shape} and {b.shape} are not compatible") from None
    return a.data, b.data


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    da, db = _broadcast_data(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(da + db, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    da, db = _broadcast_data(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(da - db, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    da, db = _broadcast_data(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * db, a.shape), _unbroadcast(g * da, b.shape)

    return _from_op(da * db, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    da, db = _broadcast_data(a, b, "div")

    def backward(g):
        return (
            _unbroadcast(g / db, a.shape),
            _unbroadcast(-g * da / (db * db), b.shape),
        )

    return _from_op(da / db, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _from_op(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    factor = float(factor)
    return _from_op(a.data * factor, (a,), lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    da = a.data
    return _from_op(da * da, (a,), lambda g: (2.0 * da * g,))


# ---------------------------------------------------------------------------
# matrix products
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    da, db = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(db, -1, -2)
        gb = np.swapaxes(da, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _from_op(da @ db, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _from_op(np.where(mask, a.data, 0.0), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact (erf) form."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _from_op(x * cdf, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _from_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _from_op(y, (a,), lambda g: (g * (1.0 - y * y),))


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _from_op(y, (a,), lambda g: (g * y,))


def tlog(a: Tensor) -> Tensor:
    return _from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _from_op(y, (a,), lambda g: (g / (2.0 * y),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow; derivative is sigmoid."""
    x = a.data
    return _from_op(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),))


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g_exp = g
        if axis is not None and not keepdims:
            g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _from_op(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _from_op(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        inv = None
    else:
        axes = tuple(axes)
        inv = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _from_op(np.transpose(a.data, axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _from_op(a.data[idx].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# row indexing (the workhorse of sparse graph attention)
# ---------------------------------------------------------------------------


def gather_rows(a: Tensor, index: Array) -> Tensor:
    """Select rows along axis 0: ``out[i] = a[index[i]]``."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _from_op(a.data[index], (a,), backward)


def scatter_add(a: Tensor, index: Array, num_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``num_rows`` output rows: ``out[index[i]] += a[i]``."""
    index = np.asarray(index, dtype=np.intp)
    out_data = np.zeros((num_rows,) + a.shape[1:], dtype=np.float64)
    np.add.at(out_data, index, a.data)

    def backward(g):
        return (g[index],)

    return _from_op(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# fused normalization ops
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _from_op(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Uses the population variance of each slice; ``eps`` guards the division.
    """
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _from_op(y, (a, gain, bias), backward)


def dropout(a: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity at inference, 1/(1-p) scaling while training."""
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _from_op(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# numeric hygiene
# ---------------------------------------------------------------------------


def assert_finite(t: Tensor, context: str) -> Tensor:
    """Raise :class:`TrainingError` if ``t`` holds NaN/Inf; NaN is an error state."""
    if not np.all(np.isfinite(t.data)):
        raise TrainingError(f"non-finite values encountered in {context}")
    return t


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction over a named parameter dict.

    Missing gradients are treated as exact zeros (the moments still decay).
    ``clip_norm`` enables global-norm gradient clipping; it is off by default.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _clip(self, grads: dict[str, Array]) -> dict[str, Array]:
        if self.clip_norm is None:
            return grads
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total <= self.clip_norm or total == 0.0:
            return grads
        factor = self.clip_norm / total
        return {name: g * factor for name, g in grads.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        grads = {}
        for name, p in self.params.items():
            g = p.grad_array()
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"NaN/Inf gradient for parameter {name!r} at step {t}")
            grads[name] = g
        grads = self._clip(grads)
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "tailcast-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Mapping[str, Tensor], meta: dict | None = None) -> None:
    """Write parameters as a flat, versioned JSON container.

    Values are serialized with ``repr`` precision (shortest round-trip), so a
    save/load cycle reproduces every float64 bit-exactly.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in sorted(params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict[str, Array], dict]:
    """Read a checkpoint; returns (name -> array, meta)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not a valid checkpoint file: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unexpected checkpoint format {payload.get('format')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    params = {}
    for name, entry in payload["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = arr
    return params, payload.get("meta", {})


def load_params_into(params: Mapping[str, Tensor], arrays: Mapping[str, Array]) -> None:
    """Copy checkpoint arrays into live parameter tensors, strictly by name."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter names do not match (missing={missing}, unexpected={extra})")
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {p.data.shape}")
        p.data = arr.copy()
