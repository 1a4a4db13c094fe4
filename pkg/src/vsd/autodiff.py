"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set covers exactly what a small encoder-decoder stack needs:
matmul/linear, elementwise arithmetic, concatenation and slicing, softmax
variants, layer normalisation, relu, embedding lookup, dropout and
reductions.  Gradients accumulate additively into ``Tensor.grad`` on
leaves; callers reset them explicitly.

Recording is scoped: a primitive appends one record to the innermost
active ``Tape``, and only when an input participates in differentiation.
``backward`` walks the records once, in strict reverse execution order.
Evaluating outside any tape is recording-free, which makes inference on
frozen parameters cheap and safe to run concurrently over disjoint
inputs.  Taped execution is single-threaded by design.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "concat",
    "slice_axis",
    "take_rows",
    "embedding",
    "reshape",
    "transpose",
    "softmax",
    "log_softmax",
    "masked_softmax",
    "relu",
    "layer_norm",
    "dropout",
    "sum_values",
    "mean_values",
    "finite_difference_check",
    "zero_grads",
]

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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

    def zero_grad(self) -> None:
        self.grad = None

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_values(self, axis=axis)

    def mean(self, axis=None):
        return mean_values(self, axis=axis)


class Tape:
    """Ordered record of executed primitives for one reverse traversal.

    Entering the tape as a context manager makes it the recording target
    for primitives executed in the ``with`` block.  Each record holds the
    produced tensor and the vector-Jacobian callbacks of its tracked
    inputs; ``backward`` consumes the records last-to-first.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, list[tuple[Tensor, Callable]]]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _append(self, out: Tensor, vjps: list[tuple[Tensor, Callable]]) -> None:
        self._records.append((out, vjps))
        self._produced.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def reset(self) -> None:
        self._records.clear()
        self._produced.clear()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out_data: np.ndarray, pairs) -> Tensor:
    """Wrap a forward result, recording tracked inputs on the active tape."""
    tape = _active_tape()
    if tape is None:
        return Tensor(out_data)
    tracked = [(t, f) for t, f in pairs if t.requires_grad]
    if not tracked:
        return Tensor(out_data)
    out = Tensor(out_data)
    out.requires_grad = True
    tape._append(out, tracked)
    return out


def backward(tape: Tape, loss: Tensor, *, reset: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    The loss must be a scalar produced through ``tape``.  Leaf gradients
    add onto any existing ``grad`` buffer; the tape is reset afterwards
    unless ``reset=False``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not tape.produced(loss):
        raise ValueError("backward: loss is detached from the tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, vjps in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, vjp in vjps:
            contrib = vjp(g)
            if tape.produced(t):
                acc = grads.get(id(t))
                grads[id(t)] = contrib if acc is None else acc + contrib
            else:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += contrib
    if reset:
        tape.reset()


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over axes that numpy broadcasting introduced."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return _finish(out, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    return _finish(out, (
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    ad, bd = a.data, b.data
    return _finish(out, (
        (a, lambda g: _unbroadcast(g * bd, ad.shape)),
        (b, lambda g: _unbroadcast(g * ad, bd.shape)),
    ))


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    return _finish(x.data * s, ((x, lambda g: g * s),))


def matmul(a, b) -> Tensor:
    """Matrix product; stacked (>=3-d) operands need identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-d, got shapes {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for shapes {ad.shape} and {bd.shape}")
    if ad.shape[:-2] != bd.shape[:-2]:
        raise ValueError(f"matmul: leading dimensions differ for shapes {ad.shape} and {bd.shape}")
    out = ad @ bd
    return _finish(out, (
        (a, lambda g: g @ bd.swapaxes(-1, -2)),
        (b, lambda g: ad.swapaxes(-1, -2) @ g),
    ))


def linear(x, w, b=None) -> Tensor:
    """x @ w + b for 2-d x [n, d_in] and w [d_in, d_out]."""
    x, w = _as_tensor(x), _as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError(f"linear: expected 2-d operands, got shapes {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise ValueError(f"linear: input width mismatch for shapes {xd.shape} and {wd.shape}")
    out = xd @ wd
    pairs = [
        (x, lambda g: g @ wd.T),
        (w, lambda g: xd.T @ g),
    ]
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (wd.shape[1],):
            raise ValueError(f"linear: bias shape {b.data.shape} does not match output width {wd.shape[1]}")
        out = out + b.data
        pairs.append((b, lambda g: g.sum(axis=0)))
    return _finish(out, pairs)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    ndim = tensors[0].data.ndim
    ref = list(tensors[0].data.shape)
    for t in tensors[1:]:
        s = list(t.data.shape)
        if t.data.ndim != ndim or any(s[i] != ref[i] for i in range(ndim) if i != axis % ndim):
            raise ValueError(
                f"concat: shapes {[tuple(x.data.shape) for x in tensors]} do not align off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in tensors])

    def make_vjp(i):
        sl = [slice(None)] * ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _finish(out, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    x = _as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape)
        z[sl] = g
        return z

    return _finish(x.data[sl].copy(), ((x, vjp),))


def take_rows(x: Tensor, indices) -> Tensor:
    """Pick x[i, indices[i]] per row of a 2-d tensor."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.data.shape[0]:
        raise ValueError(f"take_rows: shapes {x.data.shape} and index {idx.shape} do not align")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise ValueError(f"take_rows: index out of range for width {x.data.shape[1]}")
    rows = np.arange(idx.shape[0])
    shape = x.data.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, (rows, idx), g)
        return z

    return _finish(x.data[rows, idx].copy(), ((x, vjp),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup into an embedding table; gradients scatter-add."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"embedding: ids must be 1-d, got shape {idx.shape}")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)][0])
        raise ValueError(f"embedding: id {bad} out of range for table of {n} rows")
    shape = table.data.shape

    def vjp(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return _finish(table.data[idx].copy(), ((table, vjp),))


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    orig = x.data.shape
    return _finish(x.data.reshape(shape).copy(), ((x, lambda g: g.reshape(orig)),))


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish(np.ascontiguousarray(x.data.transpose(axes)), ((x, lambda g: g.transpose(inv)),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    w = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return w * (g - (g * w).sum(axis=axis, keepdims=True))

    return _finish(w, ((x, vjp),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def vjp(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return _finish(out, ((x, vjp),))


def masked_softmax(x: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax over the last axis with masked positions receiving weight 0.0.

    ``mask`` is boolean (True = attend) and must broadcast against ``x``.
    A row with every position masked is a hard error: it indicates a
    harness bug, not a valid state.
    """
    if axis != -1:
        raise ValueError("masked_softmax: only the last axis is supported")
    x = _as_tensor(x)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: some row has every position masked")
    neg = np.where(m, x.data, -np.inf)
    mx = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - mx)
    w = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return w * (g - (g * w).sum(axis=-1, keepdims=True))

    return _finish(w, ((x, vjp),))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    keep = x.data > 0

    return _finish(np.where(keep, x.data, 0.0), ((x, lambda g: g * keep),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} do not match width {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gain.data + bias.data
    gd = gain.data

    def vjp_x(g):
        dy = g * gd
        return inv * (dy - dy.mean(axis=-1, keepdims=True) - y * (dy * y).mean(axis=-1, keepdims=True))

    lead = tuple(range(x.data.ndim - 1))
    return _finish(out, (
        (x, vjp_x),
        (gain, lambda g: (g * y).sum(axis=lead)),
        (bias, lambda g: g.sum(axis=lead)),
    ))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    if rate < 0 or rate >= 1:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0 or rng is None:
        return x
    x = _as_tensor(x)
    keep = rng.random(x.data.shape) >= rate
    factor = keep / (1.0 - rate)
    return _finish(x.data * factor, ((x, lambda g: g * factor),))


def sum_values(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.data.shape

    if axis is None:
        vjp = lambda g: np.broadcast_to(g, shape).copy()
        return _finish(np.asarray(x.data.sum()), ((x, vjp),))

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _finish(x.data.sum(axis=axis), ((x, vjp),))


def mean_values(x: Tensor, axis=None) -> Tensor:
    x = _as_tensor(x)
    shape = x.data.shape
    if axis is None:
        n = x.data.size
        vjp = lambda g: np.broadcast_to(g / n, shape).copy()
        return _finish(np.asarray(x.data.mean()), ((x, vjp),))
    n = shape[axis]

    def vjp(g):
        return np.broadcast_to(np.expand_dims(g / n, axis), shape).copy()

    return _finish(x.data.mean(axis=axis), ((x, vjp),))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float = 1e-5,
    *,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare the taped gradient of ``f`` at ``point`` with central differences.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.  With
    ``max_coords`` set, a random subset of coordinates is checked (the
    generator defaults to a fixed seed), which bounds the cost on large
    parameter tensors.
    """
    if step <= 0:
        raise ValueError(f"finite_difference_check: step must be positive, got {step}")
    saved_grad = point.grad
    point.grad = None
    with Tape() as tape:
        y = f(point)
    if y.data.size != 1:
        raise ValueError(f"finite_difference_check: function must be scalar-valued, got shape {y.data.shape}")
    if tape.produced(y):
        backward(tape, y)
    analytic = (point.grad if point.grad is not None else np.zeros_like(point.data)).reshape(-1)
    point.grad = saved_grad

    flat = point.data.reshape(-1)
    n = flat.size
    if max_coords is None or n <= max_coords:
        coords = range(n)
    else:
        gen = rng if rng is not None else np.random.default_rng(0)
        coords = sorted(int(i) for i in gen.choice(n, size=max_coords, replace=False))

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(point).data)
        flat[i] = orig - step
        lo = float(f(point).data)
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError(
                f"finite_difference_check: non-finite value while perturbing coordinate {i}"
            )
        numeric = (hi - lo) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        if err > worst:
            worst = err
    return worst
