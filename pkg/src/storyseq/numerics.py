"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every model computation in the package is expressed with the functions in
this module.  Gradients are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = cross_entropy(softmax(matmul(x, w)), targets, mask)
    grads = tape.gradient(loss, [w])

Outside a tape the same functions run as plain numpy code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DegenerateBatchError, DimensionError, NonFiniteError

DTYPE = np.float64
PROB_FLOOR = 1e-12


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Seeded generator backed by Philox-4x64 (counter-based).

    Distinct ``stream`` values give independent generators for one seed.
    """
    spawn_key = () if stream is None else (int(stream),)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=spawn_key)))


class Tensor:
    """Immutable float64 array.  ``requires_grad`` marks a trainable leaf."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: adopt a freshly computed array without copying
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise NonFiniteError(f"{what} contains NaN or Inf")
        return self

    def __repr__(self):
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Leaves with ``requires_grad=True`` (and anything passed to :meth:`watch`)
    are tracked; an op is recorded when at least one input is tracked.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))
            self._keep.append(t)

    def _is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        if any(self._is_tracked(t) for t in inputs):
            for t in inputs:
                if t.requires_grad and id(t) not in self._tracked:
                    self._tracked.add(id(t))
                    self._keep.append(t)
            self._tracked.add(id(out))
            self._records.append((out, inputs, backward))

    def __len__(self):
        return len(self._records)

    def gradient(self, target: Tensor, sources: Sequence[Tensor] | Mapping[str, Tensor]):
        """Gradients of scalar ``target`` with respect to ``sources``.

        Returns a list (or a dict for mapping input) of numpy arrays.  Sources
        the target does not depend on get zeros.
        """
        if target.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape, dtype=DTYPE)}
        for out, inputs, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not self._is_tracked(inp):
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if isinstance(sources, Mapping):
            return {k: grads.get(id(t), np.zeros(t.shape, dtype=DTYPE)) for k, t in sources.items()}
        return [grads.get(id(t), np.zeros(t.shape, dtype=DTYPE)) for t in sources]


def _emit(arr: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    for tape in _TAPES:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# --------------------------------------------------------------------------
# linear algebra and shape
# --------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def concat(a, b) -> Tensor:
    """Join along the last axis: ``a`` fills columns [0, p), ``b`` the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading dimensions differ, {a.shape} vs {b.shape}")
    p = a.shape[-1]
    return _emit(np.concatenate([a.data, b.data], axis=-1), (a, b),
                 lambda g: (g[..., :p], g[..., p:]))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("stack: no tensors")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _emit(out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def select(x, index: int, axis: int = 1) -> Tensor:
    """Take one slice along ``axis`` (drops that axis)."""
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        idx = [slice(None)] * len(shape)
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _emit(np.take(x.data, index, axis=axis), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _emit(out, (x,), lambda g: (g.reshape(old),))


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), backward)


# --------------------------------------------------------------------------
# probability
# --------------------------------------------------------------------------

def softmax(logits) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted."""
    logits = as_tensor(logits)
    if logits.shape[-1] < 1:
        raise DimensionError("softmax: empty last axis")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return _emit(p, (logits,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def cross_entropy(probs, targets, mask=None) -> Tensor:
    """Masked mean of ``-log p[row, target]`` with the log clamped at 1e-12.

    ``probs`` is [rows x V]; ``targets`` and ``mask`` hold one entry per row.
    """
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise DimensionError(f"cross_entropy: probs must be 2-D, got {probs.shape}")
    rows, vocab = probs.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    mask = np.ones(rows, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE).reshape(-1)
    if targets.shape[0] != rows or mask.shape[0] != rows:
        raise DimensionError(
            f"cross_entropy: {rows} rows but {targets.shape[0]} targets / {mask.shape[0]} mask entries")
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise DimensionError(f"cross_entropy: target outside [0, {vocab})")
    total = mask.sum()
    if total == 0:
        raise DegenerateBatchError("cross_entropy: mask selects no rows")
    picked = probs.data[np.arange(rows), targets]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = -(mask * np.log(clamped)).sum() / total

    def backward(g):
        full = np.zeros((rows, vocab), dtype=DTYPE)
        live = picked > PROB_FLOOR
        full[np.arange(rows), targets] = np.where(live, -mask / (total * np.where(live, picked, 1.0)), 0.0)
        return (full * g,)

    return _emit(np.array(loss), (probs,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity (same object) outside training."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an RNG")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GradcheckReport:
    max_relative_error: float
    max_absolute_error: float
    worst: tuple[str, int]          # (tensor name, flat index) of the max relative error
    analytic: float                 # gradient values at ``worst``
    numeric: float


def gradcheck_report(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
                     eps: float = 1e-5, samples: int | None = None,
                     rng: np.random.Generator | None = None) -> GradcheckReport:
    """Compare tape gradients with central differences.

    ``f`` maps a parameter dict to a scalar tensor and must be deterministic.
    With ``samples`` set, at most that many coordinates per tensor are
    checked, chosen by ``rng``.  Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = dict(params)
    watched = {k: Tensor._wrap(v.data) for k, v in params.items()}
    with Tape() as tape:
        tape.watch(*watched.values())
        loss = f(watched)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("gradcheck: loss is not finite")
    analytic = tape.gradient(loss, watched)

    rng = rng if rng is not None else make_rng(0)
    worst_rel, worst_abs = 0.0, 0.0
    worst, at = ("", -1), (0.0, 0.0)
    for name, tensor in params.items():
        flat = tensor.data.reshape(-1)
        coords = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            coords = np.sort(rng.choice(flat.size, size=samples, replace=False))
        for c in coords:
            vals = []
            for sign in (1.0, -1.0):
                bumped = flat.copy()
                bumped[c] += sign * eps
                trial = dict(params)
                trial[name] = Tensor._wrap(bumped.reshape(tensor.shape))
                v = f(trial).item()
                if not math.isfinite(v):
                    raise NonFiniteError(f"gradcheck: loss not finite when perturbing {name}[{c}]")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2.0 * eps)
            exact = float(analytic[name].reshape(-1)[c])
            diff = abs(exact - numeric)
            err = diff / max(abs(exact), abs(numeric), 1e-8)
            worst_abs = max(worst_abs, diff)
            if err > worst_rel or worst[1] < 0:
                worst_rel, worst, at = err, (name, int(c)), (exact, numeric)
    return GradcheckReport(worst_rel, worst_abs, worst, *at)


def gradcheck(f: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, Tensor],
              eps: float = 1e-5, samples: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences."""
    return gradcheck_report(f, params, eps, samples, rng).max_relative_error
