"""Reverse-mode differentiation over numpy arrays, plus the loss primitives.

Every op takes :class:`Tensor` or array-like arguments and returns a new
``Tensor``.  A backward closure is attached only when some input requires a
gradient, so evaluation under :func:`no_grad` builds no graph at all.
"""

from __future__ import annotations

import contextlib
import enum
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from m3h.errors import DimensionError, DomainError, LabelIndexError, NumericError

BINARY_EPS = 1e-7

# Per thread, so evaluating one model never disables graph building for a
# model training concurrently in another thread.
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ProblemClass(str, enum.Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    REGRESSION = "regression"
    CLUSTER = "cluster"


class Tensor:
    """A node in the differentiation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: mul(self, -1.0)


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise and broadcasting ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# reductions and shape ------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swap_last(x) -> Tensor:
    """Transpose the last two axes."""
    x = as_tensor(x)
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    n = len(xs)
    return _node(
        np.stack([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def take_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), backward)


def index_axis(x, k: int, axis: int) -> Tensor:
    """``np.take(x, k, axis)`` for a single integer ``k``."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        idx = [slice(None)] * x.data.ndim
        idx[axis] = k
        full[tuple(idx)] = g
        return (full,)

    return _node(np.take(x.data, k, axis=axis), (x,), backward)


def pick(x, cols) -> Tensor:
    """Select ``x[i, cols[i]]`` for every row ``i``."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _node(x.data[rows, cols], (x,), backward)


# linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (n, d_in) and ``W`` of shape (d_in, d_out)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"affine: input shape {x.shape} incompatible with weight shape {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} incompatible with weight shape {W.shape}")
    return add(matmul(x, W), b)


def softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    z = np.exp(v.data - v.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (v,), backward)


def log_softmax(v, axis: int = -1) -> Tensor:
    v = as_tensor(v)
    if v.data.size == 0 or v.shape[axis] == 0:
        raise DomainError("log_softmax of an empty vector")
    shifted = v.data - v.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (v,), backward)


def l2_normalize(x, axis: int = -1, floor: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, floor)
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _node(out, (x,), backward)


def guarded_max(m, floor: float = 1e-8) -> Tensor:
    """Per-matrix scale over the last two axes of ``m``.

    Returns the largest entry when it exceeds ``floor``; otherwise the largest
    absolute entry, never below ``floor``.  Output keeps singleton trailing axes
    so it broadcasts against ``m``.
    """
    m = as_tensor(m)
    lead = m.shape[:-2]
    flat = m.data.reshape(lead + (-1,))
    top = flat.max(axis=-1)
    absflat = np.abs(flat)
    use_abs = top <= floor
    source = np.where(use_abs[..., None], absflat, flat)
    idx = source.argmax(axis=-1)
    chosen = np.take_along_axis(source, idx[..., None], axis=-1)[..., 0]
    at_floor = use_abs & (chosen < floor)
    out = np.where(at_floor, floor, chosen)
    sign = np.where(use_abs, np.sign(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]), 1.0)
    sign = np.where(at_floor, 0.0, sign)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], (g.reshape(lead) * sign)[..., None], axis=-1)
        return (gflat.reshape(m.shape),)

    return _node(out.reshape(lead + (1, 1)), (m,), backward)


# losses --------------------------------------------------------------------


def task_loss(problem: ProblemClass | str, prediction, target) -> Tensor:
    """Batch-averaged loss for one task.

    binary: binary cross-entropy on probabilities; multiclass: negative
    log-likelihood on log-probabilities; regression: mean absolute error;
    cluster: mean squared difference between input and reconstruction
    (``prediction`` is the reconstruction, ``target`` the input).
    """
    problem = ProblemClass(problem)
    prediction = as_tensor(prediction)
    if problem is ProblemClass.BINARY:
        y = np.asarray(target, dtype=np.float64).reshape(-1)
        p = reshape(prediction, (-1,))
        if p.shape != y.shape:
            raise DimensionError(f"binary loss: prediction {p.shape} vs target {y.shape}")
        if np.any(~np.isfinite(p.data)) or np.any(p.data < 0.0) or np.any(p.data > 1.0):
            raise DomainError("binary prediction outside (0, 1)")
        if np.any((y != 0.0) & (y != 1.0)):
            raise DomainError("binary target must be 0 or 1")
        p = clamp(p, BINARY_EPS, 1.0 - BINARY_EPS)
        terms = add(mul(y, log(p)), mul(1.0 - y, log(sub(1.0, p))))
        return mul(mean(terms), -1.0)
    if problem is ProblemClass.MULTICLASS:
        if prediction.data.ndim == 1:
            prediction = reshape(prediction, (1, -1))
        idx = np.atleast_1d(np.asarray(target))
        k = prediction.shape[1]
        if idx.shape[0] != prediction.shape[0]:
            raise DimensionError(f"multiclass loss: {prediction.shape[0]} predictions vs {idx.shape[0]} targets")
        if np.any(idx < 0) or np.any(idx >= k) or np.any(idx != np.floor(idx)):
            raise LabelIndexError(f"multiclass target outside [0, {k})")
        return mul(mean(pick(prediction, idx.astype(np.intp))), -1.0)
    if problem is ProblemClass.REGRESSION:
        y = np.asarray(target, dtype=np.float64).reshape(-1)
        p = reshape(prediction, (-1,))
        if p.shape != y.shape:
            raise DimensionError(f"regression loss: prediction {p.shape} vs target {y.shape}")
        return mean(absolute(sub(p, y)))
    target = as_tensor(target)
    if prediction.shape != target.shape:
        raise DimensionError(f"reconstruction {prediction.shape} vs input {target.shape}")
    return mean(square(sub(target, prediction)))


# gradient checking ---------------------------------------------------------


def analytic_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Backpropagate ``loss_fn()``; unreachable parameters get exact zeros."""
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss")
    loss.backward()
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.zero_grad()
    return grads


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_errors(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Max relative error per parameter between ``grads`` and central differences."""
    if not 0.0 < eps <= 1e-2:
        raise DomainError(f"eps must lie in (0, 1e-2], got {eps}")
    errors: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            worst = 0.0
            flat = p.data.reshape(-1)
            ana = np.asarray(grads[name]).reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = loss_fn().item()
                flat[k] = orig - eps
                down = loss_fn().item()
                flat[k] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise NumericError(f"non-finite loss while perturbing {name}[{k}]")
                worst = max(worst, relative_error(ana[k], (up - down) / (2.0 * eps)))
            errors[name] = worst
    return errors


def gradient_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5) -> float:
    """Largest relative gradient error over every entry of every parameter."""
    grads = analytic_gradients(loss_fn, params)
    errors = gradient_errors(loss_fn, params, grads, eps)
    return max(errors.values(), default=0.0)


def check_finite(x: Tensor | np.ndarray, stage: str) -> None:
    data = x.data if isinstance(x, Tensor) else x
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values at stage {stage!r}")


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
