"""Dense tensors with tape-based reverse-mode differentiation.

Every array the model touches is a :class:`Tensor` wrapping a numpy array.
Operations executed while a :class:`Tape` is active are appended to it in
execution order; :meth:`Tape.backward` replays them in reverse.  Outside a
tape nothing is recorded, which is how evaluation and the gradient-detached
masking path run.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = (x * x).sum()
    tape.backward(y)
    x.grad  # array([2., 4.])
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DegenerateError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "grad_check",
    "GradCheckReport",
    "precision",
    "get_default_dtype",
    "debug_mode",
    "is_debug",
    "as_tensor",
    "matmul",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layer_norm",
    "concat",
    "masked_fill",
    "dropout",
    "broadcast_to",
    "where_const",
]

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)
_default_dtype: contextvars.ContextVar[type] = contextvars.ContextVar("default_dtype", default=np.float64)
_debug: contextvars.ContextVar[bool] = contextvars.ContextVar("debug", default=False)
_ids = itertools.count(1)


def get_default_dtype():
    return _default_dtype.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype new tensors are created with."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    token = _default_dtype.set(dtype)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextlib.contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """Check every op output for NaN/Inf and raise :class:`NonFiniteError`."""
    token = _debug.set(enabled)
    try:
        yield
    finally:
        _debug.reset(token)


def is_debug() -> bool:
    return _debug.get()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    """An immutable n-d array that may participate in a tape."""

    __slots__ = ("_data", "grad", "requires_grad", "tape_id", "name", "__weakref__")

    # numpy should defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data._data
        arr = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        arr.flags.writeable = False
        self._data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal constructor: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t._data = arr
        t.grad = None
        t.requires_grad = False
        t.tape_id = None
        t.name = None
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self):
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self._data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self._data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method forms of the primitives
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)


class Parameter(Tensor):
    """A trainable leaf.  Its value is replaced, never mutated, by the optimizer."""

    __slots__ = ("version",)

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.version = 0

    def assign(self, value: np.ndarray) -> None:
        value = np.array(value, dtype=self._data.dtype, copy=True)
        if value.shape != self._data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to parameter of shape {self.shape}")
        value.flags.writeable = False
        self._data = value
        self.version += 1


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of operations; the order is execution order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None
        self._done = False

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn, op: str) -> None:
        out.tape_id = next(_ids)
        out.requires_grad = True
        self.nodes.append(_Node(out, parents, backward_fn, op))

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(t) into ``t.grad`` for every tensor on the tape."""
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape_id is None or not any(n.out is root for n in reversed(self.nodes)):
            raise ContractError("root was not produced on this tape")
        if self._done:
            raise ContractError("tape has already been replayed; record a new one")
        self._done = True
        pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g if node.out.grad is None else node.out.grad + g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.tape_id is None:
                    leaves[key] = parent
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
        for key, leaf in leaves.items():
            g = pending.pop(key)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, root: Tensor) -> None:
    tape.backward(root)


def _result(arr: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if _debug.get():
        _check_finite(arr, op)
    out = Tensor._wrap(arr)
    tape = _active_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    a = a if isinstance(a, Tensor) else Tensor(a, dtype=_peer_dtype(b))
    b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype)
    return a, b


def _peer_dtype(x):
    return x.dtype if isinstance(x, Tensor) else None


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def subtract(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "subtract")


def multiply(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw, "multiply")


def divide(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DegenerateError("division by zero")
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw, "divide")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DegenerateError("log of a non-positive value")
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x < 0):
        raise DegenerateError("sqrt of a negative value")
    out = np.sqrt(x)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    x = a.data
    pos = x > 0
    return _result(np.where(pos, x, 0).astype(x.dtype), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(x * (_GELU_C + _GELU_C * 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C + (3 * 0.044715 * _GELU_C) * x2
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), bw, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(out, (a,), lambda g: (g * sig,), "softplus")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    x = a.data
    keep = x >= floor
    return _result(np.where(keep, x, floor).astype(x.dtype), (a,), lambda g: (g * keep,), "clamp_min")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    out = np.where(mask, a.dtype.type(value), a.data)
    return _result(out, (a,), lambda g: (np.where(mask, 0, g),), "masked_fill")


def where_const(mask, a: Tensor, other: float) -> Tensor:
    """Keep ``a`` where mask is true, a constant elsewhere."""
    return masked_fill(a, ~np.asarray(mask, dtype=bool), other)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout; identity unless ``train`` and ``rate > 0``."""
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in train mode needs a seeded generator")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / a.dtype.type(1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# shape ---------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    cuts = np.cumsum(sizes)[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; backward scatters with ``np.add.at``."""
    if isinstance(idx, Tensor):
        idx = idx.data
    src, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(a.data[idx]), (a,), bw, "getitem")


# reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / count)


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # shared weight: fold the batch axes instead of summing [.., k, n] slices
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def softmax_lastdim(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is false are exactly 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=-1)):
            raise DegenerateError("softmax slice has no unmasked entry")
        z = np.where(mask, z, -np.inf)
    # masked entries are -inf here, so exp sends them to exactly 0
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply gain and bias."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    feat = x.shape[-1]
    if gain.shape != (feat,) or bias.shape != (feat,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match features {feat}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out.astype(xd.dtype, copy=False), (x, gain, bias), bw, "layer_norm")


# verification ----------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    analytic: list[np.ndarray] = field(repr=False)
    numeric: list[np.ndarray] = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-4,
               tol: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central finite differences.

    ``x`` is one tensor or a sequence of tensors, passed positionally to ``f``.
    Each probe temporarily swaps a perturbed array into the tensor, so ``f`` may
    also read the tensors by closure (as a model reading its parameter dict does).
    Error per entry is ``|g - g_fd| / max(1, |g|, |g_fd|)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            y = f(*xs)
        if y.size != 1:
            raise ContractError(f"grad_check needs a scalar function, got shape {y.shape}")
        tape.backward(y)
        analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in xs]
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g

    def probe(t: Tensor, flat_index: int, delta: float) -> float:
        base = t._data
        bumped = base.copy()
        bumped.reshape(-1)[flat_index] += delta
        bumped.flags.writeable = False
        t._data = bumped
        try:
            val = f(*xs).item()
        finally:
            t._data = base
        if not math.isfinite(val):
            raise NonFiniteError(f"f is non-finite at probe offset {delta:+g}")
        return val

    numeric = []
    worst = 0.0
    for t, ga in zip(xs, analytic):
        gn = np.zeros(t.shape)
        for i in range(t.size):
            gn.reshape(-1)[i] = (probe(t, i, h) - probe(t, i, -h)) / (2 * h)
        numeric.append(gn)
        if t.size:
            err = np.abs(ga - gn) / np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gn)))
            worst = max(worst, float(err.max()))
    return GradCheckReport(worst, tol, analytic, numeric)
