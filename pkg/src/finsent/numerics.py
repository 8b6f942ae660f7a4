"""Dense float32 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient.  With no tape active they run as plain
numpy computations, which is how evaluation and finite-difference checks
use them.

Storage is float32 by default.  Every operation preserves the dtype of its
inputs, so a float64 copy of a model can be run through the same code for
high-precision reference computations.

Random numbers come from numpy's Philox4x32 counter-based generator
(:func:`make_rng`); every stochastic operation takes a generator explicitly.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericalError

DEFAULT_DTYPE = np.float32
GELU_COEF = math.sqrt(2.0 / math.pi)

_local = threading.local()


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox4x32-10 generator keyed by ``(seed, stream)``.

    Separate streams give independent sequences from a single user seed,
    e.g. one for weight init and one for dropout.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.is_leaf = not requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar for the handful of ops with a natural symbol.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the ``with`` block
    are recorded.  Tapes nest per thread and separate threads keep separate
    stacks.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _record(out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                tape.leaves.setdefault(id(t), t)
        tape.nodes.append(_Node(result, tuple(inputs), backward))
    return result


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape`` starting from scalar ``loss``.

    Sets ``.grad`` on every leaf that took part in the recorded computation
    (zeros when no path reaches the loss) and returns ``{leaf: grad}``.
    Tensors listed in ``wrt`` are included even if the forward pass never
    touched them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.all(np.isfinite(loss.data)):
        raise NumericalError(f"loss is not finite: {loss.data.reshape(-1)[0]}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    targets = dict(tape.leaves)
    if loss.is_leaf and loss.requires_grad:
        targets.setdefault(id(loss), loss)
    for t in wrt or ():
        targets.setdefault(id(t), t)
    result = {}
    for key, t in targets.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(t.data)
        elif g.shape != t.data.shape:
            g = np.broadcast_to(g, t.data.shape).copy()
        t.grad = g.astype(t.data.dtype, copy=False)
        result[t] = t.grad
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def add_constant(a: Tensor, const: np.ndarray) -> Tensor:
    """``a + const`` where ``const`` is a non-differentiable array (e.g. an attention mask)."""
    const = np.asarray(const, dtype=a.data.dtype)
    out = a.data + const
    return _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1 - y * y),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = a.data
    c = x.dtype.type(GELU_COEF)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1 + t)

    def grad(g):
        dinner = c * (1 + 3 * k * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _record(y, (a,), grad)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _record(
        np.asarray(a.data.mean(dtype=a.data.dtype)),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.data.dtype),),
    )


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]`` along the first axis (index may repeat)."""
    index = np.asarray(index, dtype=np.int64)

    def grad(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), grad)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of a ``[vocab x hidden]`` table for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n}): min {ids.min()}, max {ids.max()}")

    def grad(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _record(table.data[ids], (table,), grad)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either 2-D (shared across the
    batch) or has the same batch axes as ``a``.
    """
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.data.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), grad)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x[..., in]``, ``w[in, out]``, ``b[out]``."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    out = np.matmul(x.data, w.data)
    if b is not None:
        out += b.data

    def grad(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, w.data.T)
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, grad)


# ---------------------------------------------------------------------------
# Normalisation, activations, regularisation
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax; entries equal to ``-inf`` get probability 0."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (x,), grad)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    h = gamma.shape[-1]
    if x.shape[-1] != h or beta.shape != gamma.shape:
        raise DimensionError(f"layer_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def grad(g):
        g2 = g.reshape(-1, h)
        ggamma = (g2 * xhat.reshape(-1, h)).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx_hat = g * gamma.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _record(y, (x, gamma, beta), grad)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout.  Returns ``x`` itself in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = rng.random(x.shape) >= p
    factor = (keep / (1.0 - p)).astype(x.data.dtype)
    return _record(x.data * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def log_softmax_array(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [batch x classes] logits, got {logits.shape}")
    b, c = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != b:
        raise DimensionError(f"cross_entropy: {b} logit rows but {t.shape[0]} targets")
    if b == 0:
        raise ContractError("cross_entropy over an empty batch")
    if t.min() < 0 or t.max() >= c:
        raise IndexError(f"cross_entropy target out of range [0, {c}): {t.min()}..{t.max()}")
    logp = log_softmax_array(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, t].mean(dtype=logits.data.dtype)

    def grad(g):
        d = np.exp(logp)
        d[rows, t] -= 1
        return (d * (g / b),)

    return _record(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes differ {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ContractError("mse over an empty batch")
    diff = pred.data - target.data
    n = diff.size
    loss = np.asarray((diff * diff).mean(dtype=pred.data.dtype))
    return _record(loss, (pred, target), lambda g: (g * 2 * diff / n, -g * 2 * diff / n))


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


def central_difference(
    fn: Callable[[list[np.ndarray]], float],
    arrays: list[np.ndarray],
    h: float = 1e-3,
    indices: dict[int, np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Central finite-difference gradient of scalar ``fn`` w.r.t. every element.

    ``arrays`` are perturbed in place (and restored), so pass float64 copies
    when a 64-bit reference is wanted.  ``indices`` optionally limits the
    flat positions probed per array; unprobed entries come back as NaN.
    """
    grads = []
    for k, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        g = np.full(flat.shape, np.nan) if indices and k in indices else np.zeros(flat.shape)
        probe = indices[k] if indices and k in indices else range(flat.size)
        for i in probe:
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            g[i] = (up - down) / (2 * h)
        grads.append(g.reshape(arr.shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
