"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Every tensor op records its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` walks the tape in reverse
topological order, accumulating each node's gradient once before
propagating it, then frees the tape.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "RngState",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "softmax",
    "log_softmax",
    "layernorm",
    "batchnorm",
    "activation",
    "relu",
    "gelu",
    "gumbel_softmax",
    "cross_entropy",
    "concat",
    "stack",
    "no_grad",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "count_macs",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_MAC_COUNTERS: list["MacCounter"] = []

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715
GUMBEL_EPS = 1e-12


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul executed."""

    def __init__(self, exhaustive: bool = False):
        self.exhaustive = exhaustive
        self.total = 0
        self.calls: list[tuple[tuple[int, ...], tuple[int, ...], int]] = []

    def record(self, a_shape, b_shape, out_shape) -> None:
        k = a_shape[-1]
        if self.exhaustive:
            # one MAC per (output element, inner index) pair, enumerated
            macs = 0
            for _ in np.ndindex(*out_shape):
                for _ in range(k):
                    macs += 1
        else:
            macs = int(np.prod(out_shape, dtype=np.int64)) * k
        self.total += macs
        self.calls.append((tuple(a_shape), tuple(b_shape), macs))


@contextlib.contextmanager
def count_macs(exhaustive: bool = False):
    counter = MacCounter(exhaustive=exhaustive)
    _MAC_COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTERS.remove(counter)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype.kind == "f" and dtype is None:
        return data
    return np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense array with an optional gradient accumulator."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not require grad")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
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
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape
        return _record(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)),
        )

    def __rsub__(self, other):
        return _wrap(other, self.dtype) - self

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        return _record(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data
        return _record(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
        )

    def __rtruediv__(self, other):
        return _wrap(other, self.dtype) / self

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return _record(x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.data.dtype

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, idx, g)
            return (out,)

        return _record(self.data[idx], (self,), backward)

    # -- reductions / shape -----------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _record(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _record(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _record(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int):
        return _record(np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    # -- elementwise ------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _record(out, (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        return _record(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return _record(out, (self,), lambda g: (g * 0.5 / out,))

    def tanh(self):
        out = np.tanh(self.data)
        return _record(out, (self,), lambda g: (g * (1.0 - out * out),))

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)


def _wrap(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or _DEFAULT_DTYPE))


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _toposort(root: Tensor) -> list[Tensor]:
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


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    for counter in _MAC_COUNTERS:
        counter.record(a.shape, b.shape, out.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return _record(out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gain``/``bias``."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (
            gx,
            _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None,
            _unbroadcast(g, bias.shape) if bias.requires_grad else None,
        )

    return _record(out, (x, gain, bias), backward)


def batchnorm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each feature (last axis) over all leading axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place. A batch of one is allowed; its variance is zero
    and the eps floor keeps the result finite.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    axes = tuple(range(x.ndim - 1))
    if training:
        n = int(np.prod([x.shape[a] for a in axes]))
        if n < 1:
            raise ShapeError("batchnorm needs at least one sample in training mode")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        unbiased = var * n / (n - 1) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        xc = x.data - running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            if training:
                gx = inv * (gh - gh.mean(axis=axes) - xhat * (gh * xhat).mean(axis=axes))
            else:
                gx = gh * inv
        return (
            gx,
            (g * xhat).sum(axis=axes) if gain.requires_grad else None,
            g.sum(axis=axes) if bias.requires_grad else None,
        )

    return _record(out.astype(x.dtype, copy=False), (x, gain, bias), backward)


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def gelu(x: Tensor, approximate: str = "tanh") -> Tensor:
    x = _wrap(x)
    xd = x.data
    if approximate == "tanh":
        inner = GELU_C * (xd + GELU_K * xd**3)
        t = np.tanh(inner)
        out = 0.5 * xd * (1.0 + t)
        deriv = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xd * xd)
    elif approximate == "none":
        from scipy.special import erf

        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        out = xd * cdf
        deriv = cdf + xd * np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    else:
        raise ValueError(f"unknown gelu approximation {approximate!r}")
    return _record(out.astype(x.dtype, copy=False), (x,), lambda g: (g * deriv,))


def activation(x: Tensor, kind: str) -> Tensor:
    kind = kind.lower()
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


def gumbel_softmax(
    logits: Tensor,
    tau: float,
    hard: bool = False,
    rng: "RngState | None" = None,
    noise: np.ndarray | None = None,
) -> Tensor:
    """Gumbel-Softmax over the last axis.

    ``rng=None`` and ``noise=None`` disables the noise. In hard mode the
    forward value is the one-hot argmax of the soft sample and the gradient
    is the soft sample's (straight-through).
    """
    if not tau > 0:
        raise ValueError(f"gumbel_softmax temperature must be > 0, got {tau}")
    logits = _wrap(logits)
    if noise is None:
        noise = rng.gumbel(logits.shape) if rng is not None else 0.0
    y = (logits.data + noise) / tau
    y = y - y.max(axis=-1, keepdims=True)
    e = np.exp(y)
    soft = (e / e.sum(axis=-1, keepdims=True)).astype(logits.dtype, copy=False)
    if hard:
        idx = soft.argmax(axis=-1)
        out = np.zeros_like(soft)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    else:
        out = soft

    def backward(g):
        return (soft * (g - (g * soft).sum(axis=-1, keepdims=True)) / tau,)

    return _record(out, (logits,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    logits = _wrap(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [B,C] and labels [B], got {logits.shape}, {labels.shape}")
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    b = labels.size
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return _record(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# ---------------------------------------------------------------------------
# randomness
# ---------------------------------------------------------------------------


class RngState:
    """Seeded random stream; identical seed and call sequence give identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.position = 0

    def _count(self, shape) -> None:
        self.position += int(np.prod(shape)) if shape is not None else 1

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        self._count(shape)
        return self._gen.uniform(low, high, size=shape)

    def gumbel(self, shape, eps: float = GUMBEL_EPS) -> np.ndarray:
        u = self.uniform(shape, eps, 1.0 - eps)
        return -np.log(-np.log(u))

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        self._count(shape)
        return self._gen.normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        self._count(size)
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self._count((n,))
        return self._gen.permutation(n)

    def spawn(self, salt: int) -> "RngState":
        """Independent child stream keyed by ``salt``, not consuming this stream."""
        seq = np.random.SeedSequence([self.seed, int(salt)])
        return RngState(int(seq.generate_state(1, np.uint64)[0]))

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "position": self.position,
            "bit_generator": self._gen.bit_generator.state,
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "RngState":
        rng = cls(state["seed"])
        rng._gen.bit_generator.state = state["bit_generator"]
        rng.position = int(state["position"])
        return rng
