"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at least
one input requires a gradient.  Outside a tape nothing is recorded, which is
the inference path.  Gradients accumulate additively into ``Tensor.grad``;
callers zero them explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DTYPE = np.float64
_TAPES: list["Tape"] = []
_CHECK_FINITE = True


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the storage type (float64 is the verification mode)."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    prev, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so every node's inputs precede it
    and a reverse walk is a valid topological order.
    """

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, out: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if out.size != 1:
                raise ContractError(f"backward needs a scalar output or explicit grad, got shape {out.shape}")
            grad = np.ones_like(out.data)
        _accumulate(out, np.asarray(grad, dtype=out.data.dtype))
        for node_out, parents, fn in reversed(self.nodes):
            g = node_out.grad
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is not None and p.requires_grad:
                    _accumulate(p, pg)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    t.grad = np.array(g) if t.grad is None else t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if _TAPES:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                _TAPES[-1].nodes.append((out, parents, backward))
                break
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Record an operation defined outside this module.

    ``backward`` maps the output gradient to one gradient (or None) per parent.
    """
    return _result(np.asarray(data, dtype=_DTYPE), tuple(parents), backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if (b.data == 0).any():
        raise NumericError("division by zero")

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D operands, or batched over matching leading axes.

    A 2-D right operand is shared across the batch of a higher-rank left operand.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ in {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0] or weight.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    y = x.data @ weight.data
    if bias is not None:
        y = y + bias.data

    def backward(g):
        flat = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ flat
        gb = flat.sum(axis=0) if bias is not None else None
        return g @ weight.data.T, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, backward, "linear")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose without axes needs a 2-D tensor, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def index(a: Tensor, idx) -> Tensor:
    """Slice or gather; gradients scatter back (summing repeated indices)."""
    data = a.data[idx]
    fancy = _is_fancy(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(data), (a,), backward, "index")


def sum_(a: Tensor, axis=None) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(y, (a,), lambda g: (g * inside,), "clamp")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _result(y, (a,), backward, "gelu")


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction; ``mask`` marks the allowed entries.

    Masked entries get exactly zero probability.  Every row needs at least one
    allowed entry.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), backward, "softmax")


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got {a.shape}")
    return softmax(a, axis=-1, mask=mask)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: features {x.shape[-1:]} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, g.shape[-1])
        return gx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)

    return _result(y, (x, gain, bias), backward, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids outside [0, {table.shape[0]})")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), backward, "embedding")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if logits.shape[0] == 0:
        raise ContractError("cross_entropy over zero rows")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    rows = np.arange(len(targets))
    loss = (lse - x[rows, targets]).mean()

    def backward(g):
        p = np.exp(x - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / len(targets)),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def backward(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(g / safe, axis) * a.data,)

    return _result(n, (a,), backward, "l2_norm")


def normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean length."""
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if (n == 0).any():
        raise ContractError("normalize: zero-norm vector")
    y = a.data / n

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return _result(y, (a,), backward, "normalize")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_similarity: rows of {a.shape} vs {b.shape}")
    return matmul(normalize(a), transpose(normalize(b)))


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> float:
    """Largest elementwise relative error between analytic and central-difference gradients.

    ``f(*inputs)`` must return a single-element tensor.  With ``max_coords``,
    at most that many coordinates per input are probed, chosen by ``seed``.
    """
    return max(grad_check_each(f, inputs, step, max_coords, seed), default=0.0)


def grad_check_each(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    max_coords: int | None = None, seed: int = 0) -> list[float]:
    """Per-input version of :func:`grad_check`."""
    if step <= 0:
        raise ContractError("grad_check step must be positive")
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
        tape.backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]
    finally:
        for t, (rg, _) in zip(inputs, saved):
            t.requires_grad = rg

    rng = np.random.default_rng(seed)
    errors = []
    try:
        for t, an in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            if not np.shares_memory(flat, t.data):
                raise ContractError("grad_check inputs must be contiguous")
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                plus = f(*inputs).item()
                flat[i] = orig - step
                minus = f(*inputs).item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * step)
                a = an.reshape(-1)[i]
                if not (np.isfinite(a) and np.isfinite(numeric)):
                    raise NumericError(f"non-finite gradient at coordinate {i} of {t.name or 'input'}")
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
            errors.append(float(worst))
    finally:
        for t, (_, g) in zip(inputs, saved):
            t.grad = g
    return errors
