"""Dense reverse-mode differentiation on numpy arrays.

Every value is a :class:`Tensor` wrapping a float64 array. Primitive ops
record their parents and a closure mapping the output adjoint to the input
adjoints; :func:`backward` walks the recorded graph in reverse topological
order. Leading axes broadcast like numpy, so a whole batch of windows flows
through one graph.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    out.op = op
    return out


# ---------------------------------------------------------------- elementwise


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _make(out, (a, b), grad_fn, "div")


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    mask = x.data > 0  # subgradient 0 at 0

    def grad_fn(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), grad_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), grad_fn, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), grad_fn, "tanh")


# ---------------------------------------------------------------- shape ops


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or apply a full permutation when ``axes`` is given."""
    x = _lift(x)
    if axes is None:
        if x.ndim < 2:
            return x
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), grad_fn, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _lift(x)
    src = x.shape

    def grad_fn(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(tuple(shape)), (x,), grad_fn, "reshape")


def flatten(x: Tensor, start_axis: int = -2) -> Tensor:
    """Merge all axes from ``start_axis`` onward into one."""
    x = _lift(x)
    start = start_axis % x.ndim
    return reshape(x, x.shape[:start] + (-1,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no inputs")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    x = _lift(x)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), grad_fn, "getitem")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _lift(x)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = math.prod(x.shape[a] for a in axes)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(np.mean(x.data, axis=axis, keepdims=keepdims), (x,), grad_fn, "mean")


# ---------------------------------------------------------------- composite primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _lift(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gxhat = g * gain.data
        gx = inv_std * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), grad_fn, "layer_norm")


def pooling_matrix(length: int, window: int) -> np.ndarray:
    """Rows average consecutive runs of ``window`` steps; the last run may be shorter."""
    if window < 1:
        raise ValueError(f"pooling window must be >= 1, got {window}")
    n_out = -(-length // window)
    mat = np.zeros((n_out, length), dtype=DTYPE)
    for r in range(n_out):
        lo, hi = r * window, min((r + 1) * window, length)
        mat[r, lo:hi] = 1.0 / (hi - lo)
    return mat


def avg_pool_1d(x: Tensor, window: int) -> Tensor:
    """Average-pool along the time axis of a ``(..., L, D)`` tensor."""
    x = _lift(x)
    if window < 1:
        raise ValueError(f"pooling window must be >= 1, got {window}")
    if x.ndim < 2:
        raise DimensionError(f"avg_pool_1d expects (..., L, D), got {x.shape}")
    mat = pooling_matrix(x.shape[-2], window)

    def grad_fn(g):
        return (np.matmul(mat.T, g),)

    return _make(np.matmul(mat, x.data), (x,), grad_fn, "avg_pool_1d")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Divide by the L2 norm along ``axis``; norms below ``eps`` are replaced by ``eps``."""
    x = _lift(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    guarded = norm <= eps
    denom = np.where(guarded, eps, norm)
    out = x.data / denom

    def grad_fn(g):
        proj = np.where(guarded, 0.0, np.sum(g * out, axis=axis, keepdims=True))
        return ((g - out * proj) / denom,)

    return _make(out, (x,), grad_fn, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle between vectors along the last axis."""
    a, b = _lift(a), _lift(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_similarity: lengths {a.shape} and {b.shape} differ")
    return sum(mul(l2_normalize(a, eps=eps), l2_normalize(b, eps=eps)), axis=-1)


def cosine_matrix(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Pairwise cosine similarity between the rows of ``(..., N, M)``; returns ``(..., N, N)``."""
    unit = l2_normalize(x, axis=-1, eps=eps)
    # rounding can leave |cos| a few ulp above 1; the true derivative there is zero
    return clip(matmul(unit, transpose(unit)), -1.0, 1.0)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where clamping was active."""
    x = _lift(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def grad_fn(g):
        return (np.where(inside, g, 0.0),)

    return _make(np.clip(x.data, lo, hi), (x,), grad_fn, "clip")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    x = _lift(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = _lift(logits)
    labels = np.asarray(labels)
    n_class = logits.shape[-1]
    if n_class < 2:
        raise ValueError(f"cross_entropy needs at least 2 classes, got {n_class}")
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_class):
        raise ValueError(f"labels must lie in [0, {n_class - 1}]")
    flat = logits.data.reshape(-1, n_class)
    idx = labels.reshape(-1).astype(np.int64)
    m = flat.shape[0]
    top = flat.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(flat - top).sum(axis=1))
    nll = lse - flat[np.arange(m), idx]
    loss = nll.mean()

    def grad_fn(g):
        probs = np.exp(flat - lse[:, None])
        probs[np.arange(m), idx] -= 1.0
        return ((g * probs / m).reshape(logits.shape),)

    return _make(np.asarray(loss), (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded ops reachable from ``root``, every node after its inputs."""
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoints[key] = pg if key not in adjoints else adjoints[key] + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6
) -> float:
    """Largest ``|analytic - central| / max(1, |central|)`` over the coordinates of ``x``."""
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x).item()
        flat[i] = orig - eps
        down = f(x).item()
        flat[i] = orig
        central = (up - down) / (2.0 * eps)
        err = abs(analytic.reshape(-1)[i] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
