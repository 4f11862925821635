"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything runs on CPU via numpy. A GradientTape records primitive ops in
execution order (which is already a topological order); the backward sweep
walks the record once in reverse and accumulates gradients per tensor id.
Tensors created while no tape is active are plain values, so inference pays
no tracking cost.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, which we treat as a hard error."""


_ACTIVE_TAPE: "GradientTape | None" = None


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A row-major float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad

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
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def uniform_init(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    """Trainable tensor drawn from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class GradientTape:
    """Ordered record of primitive ops with their local-gradient closures.

    Use as a context manager around the forward pass, then call
    ``gradients(loss, leaves)``. Tapes do not nest.
    """

    def __init__(self):
        # records hold strong refs so tensor ids stay unique for the tape's life
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradientTape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a GradientTape is already active")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every tracked tensor, keyed by id."""
        if loss.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, bwd in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, bwd(g)):
                if gi is None:
                    continue
                acc = grads.get(id(t))
                # never accumulate in place: gi may alias g or forward data
                grads[id(t)] = gi if acc is None else acc + gi
        return grads

    def gradients(self, loss: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients for named leaves; leaves unreachable from loss get zeros."""
        grads = self.backward(loss)
        out = {}
        for name, t in leaves.items():
            g = grads.get(id(t))
            out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64)
        return out


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None:
        for t in inputs:
            if t.requires_grad or id(t) in tape._tracked:
                tape._tracked.add(id(out))
                tape._records.append((out, inputs, bwd))
                break
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / b.data)
    _check_finite(out.data, "div")

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        return (-g,)

    return _record(out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # stable for large |x|: exp of a non-positive argument only
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)
    _check_finite(out.data, "sigmoid")

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    out = Tensor(y)
    _check_finite(out.data, "exp")

    def bwd(g):
        return (g * y,)

    return _record(out, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(np.log(a.data))
    _check_finite(out.data, "log")

    def bwd(g):
        return (g / a.data,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    _check_finite(out.data, "matmul")

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, bwd)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return _record(out, (a,), bwd)


def gather_nodes(a, idx) -> Tensor:
    """Select rows along axis 1: out[b, ..., :] = a[b, idx[b, ...], :].

    ``a`` is (B, n, d); ``idx`` is an int array (B,) or (B, T). Output is
    (B, d) or (B, T, d). A size-1 batch in ``a`` broadcasts against a wider
    index batch. Repeated indices accumulate on the way back.
    """
    a = as_tensor(a)
    idx = np.asarray(idx)
    rows = np.zeros(idx.shape[0], dtype=np.int64) if a.shape[0] == 1 else np.arange(idx.shape[0])
    if idx.ndim == 1:
        index = (rows, idx)
        out = Tensor(a.data[index])
    elif idx.ndim == 2:
        index = (rows[:, None], idx)
        out = Tensor(a.data[index])
    else:
        raise ValueError(f"idx must be 1- or 2-dimensional, got {idx.ndim}")

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _record(out, (a,), bwd)


def take_last(a, idx) -> Tensor:
    """Select one entry along the last axis: out[...] = a[..., idx[...]]."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ValueError(f"idx shape {idx.shape} must equal {a.shape[:-1]}")
    out = Tensor(np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# softmax and batch normalization


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction.

    ``mask`` is a boolean array broadcastable to ``a``; True marks entries
    that participate. Excluded entries come out exactly 0. Every row needs
    at least one included entry.
    """
    a = as_tensor(a)
    x = a.data
    if mask is None:
        shift = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shift)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax row is fully masked")
        neg = np.where(mask, x, -np.inf)
        shift = x - neg.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(np.minimum(shift, 0.0)), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    _check_finite(out.data, "softmax")

    def bwd(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), bwd)


class BatchNormState:
    """Running first/second moments for one batch-norm site."""

    __slots__ = ("mean", "var", "momentum", "eps")

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Normalize a (rows, d) tensor per feature.

    Training mode uses batch statistics (population variance) and updates the
    running stats in ``state``; eval mode uses the running stats.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2:
        raise ValueError(f"batch_norm expects 2-d input, got shape {x.shape}")
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        state.mean = (1.0 - state.momentum) * state.mean + state.momentum * mu
        state.var = (1.0 - state.momentum) * state.var + state.momentum * var
    else:
        mu = state.mean
        var = state.var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)
    _check_finite(out.data, "batch_norm")

    if training:
        rows = x.shape[0]

        def bwd(g):
            dxhat = g * gamma.data
            dx = inv / rows * (rows * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    else:

        def bwd(g):
            return g * (gamma.data * inv), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gamma, beta), bwd)
