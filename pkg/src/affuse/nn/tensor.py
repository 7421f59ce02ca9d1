"""Dense float64 tensors with a reverse-mode gradient tape.

Each op records its parents and a closure that pushes the output gradient
back to them. ``Tensor.backward`` walks the graph in reverse topological
order. Broadcasting follows numpy; gradients are summed back down to the
operand's shape.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import DataError, DimensionError, NumericError

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


_relu_log: list | None = None


@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation pattern of every relu evaluated inside the block."""
    global _relu_log
    prev = _relu_log
    _relu_log = log = []
    try:
        yield log
    finally:
        _relu_log = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- autograd ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``grad`` defaults to ones, which for a scalar gives the usual
        derivative.
        """
        if grad is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=DTYPE)
            if seed.shape != self.shape:
                raise DimensionError(f"seed gradient shape {seed.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by its reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def _raise_item(t):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _relu_log is not None:
        _relu_log.append(np.packbits(mask).tobytes())

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _result(data, (x,), backward, "exp")


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), backward, "log")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), backward, "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, a, b),)

    return _result(np.swapaxes(x.data, a, b), (x,), backward, "swapaxes")


def broadcast_to(x: Tensor, shape) -> Tensor:
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {tuple(shape)}") from exc

    def backward(g):
        return (unbroadcast(g, x.shape),)

    return _result(data, (x,), backward, "broadcast_to")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data, dtype=DTYPE), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``.

    Backward: dA = dC @ B^T, dB = A^T @ dC, each summed back to the
    operand's shape.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}") from exc

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: contract batch dims in one GEMM instead of summing a [B x k x n] stack
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (
            None if ga is None else unbroadcast(ga, a.shape),
            None if gb is None else unbroadcast(gb, b.shape),
        )

    return _result(data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# fused ops


def _softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received non-finite input")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for rank {x.ndim}")
    s = _softmax_array(x.data, axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax received non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-6) -> Tensor:
    """Normalize each slice along the last axis, then scale and shift."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last dimension")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias shapes {gain.shape}/{bias.shape} do not match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(x.ndim - 1))
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return _result(out, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, labels, num_classes: int | None = None) -> Tensor:
    """Mean negative log-likelihood of the true class.

    ``logits`` is [B x C]; ``labels`` holds B integer class ids.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B x C] logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {b} logit rows")
    limit = c if num_classes is None else num_classes
    for row, lab in enumerate(labels):
        if not (0 <= int(lab) < limit) or int(lab) != lab:
            raise DataError(f"label {lab!r} at row {row} outside 0..{limit - 1}")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits, axis=1)
    # gather true-class log-probabilities via a one-hot mask to stay on the tape
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    return tsum(mul(logp, onehot)) * (-1.0 / b)


def stack_sum(tensors: Iterable[Tensor]) -> Tensor:
    """Left fold of ``add`` over a non-empty sequence."""
    it = iter(tensors)
    try:
        total = next(it)
    except StopIteration:
        raise DimensionError("cannot sum an empty list of tensors") from None
    for t in it:
        total = add(total, t)
    return total


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)
