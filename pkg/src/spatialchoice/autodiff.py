"""Minimal reverse-mode differentiation engine on float64 numpy arrays.

Every operation returns a new :class:`Tensor` holding its value and a
closure that maps the output gradient to input gradients.  ``backward``
walks the implicit tape once in reverse topological order.  Operations
raise :class:`NumericalError` the moment they produce a non-finite value
instead of letting NaNs propagate.
"""

from __future__ import annotations

import contextlib
import json

import numpy as np

from .errors import NumericalError, ShapeError


class Tensor:
    """Node of the computation tape: a float64 array plus backward plumbing."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # Operator sugar; wraps plain arrays/scalars as constant leaves.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, vjp, op: str) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite output of '{op}'")
    return Tensor(value, _parents=parents, _vjp=vjp)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from the scalar ``loss``."""
    if loss.value.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node.grad is None or node._vjp is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, pgrad in zip(node._parents, parent_grads):
            if pgrad is None:
                continue
            if parent.grad is None:
                # own buffer: vjp outputs may alias or broadcast other grads
                parent.grad = np.array(pgrad, dtype=np.float64)
            else:
                np.add(parent.grad, pgrad, out=parent.grad)


# ---------------------------------------------------------------------------
# Kink tracking: lets gradient checks avoid seeds that straddle a ReLU or
# max kink, where finite differences are meaningless.


class _KinkTracker:
    def __init__(self):
        self.margin = np.inf

    def update(self, margin: float):
        if margin < self.margin:
            self.margin = float(margin)


_ACTIVE_TRACKER: _KinkTracker | None = None


@contextlib.contextmanager
def track_kink_margin():
    """Record the smallest |input| seen by any kinked op inside the block."""
    global _ACTIVE_TRACKER
    prev = _ACTIVE_TRACKER
    tracker = _KinkTracker()
    _ACTIVE_TRACKER = tracker
    try:
        yield tracker
    finally:
        _ACTIVE_TRACKER = prev


def _note_kink(margin: float) -> None:
    if _ACTIVE_TRACKER is not None:
        _ACTIVE_TRACKER.update(margin)


# ---------------------------------------------------------------------------
# Primitives.


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc
    return _make(
        value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value - b.value
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc
    return _make(
        value,
        (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
        "sub",
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc
    return _make(
        value,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        ),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        value = a.value / b.value
    except ValueError as exc:
        raise ShapeError(f"div: {a.shape} vs {b.shape}") from exc
    return _make(
        value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value**2), b.value.shape),
        ),
        "div",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError("matmul expects >=2-d operands; use scalar_project for vectors")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            value = a.value @ b.value
    except ValueError as exc:
        raise ShapeError(f"matmul: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _make(value, (a, b), vjp, "matmul")


def relu(a: Tensor) -> Tensor:
    _note_kink(np.abs(a.value).min() if a.value.size else np.inf)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, negative_slope: float = 0.2) -> Tensor:
    _note_kink(np.abs(a.value).min() if a.value.size else np.inf)
    mask = a.value > 0
    slope = np.where(mask, 1.0, negative_slope)
    return _make(a.value * slope, (a,), lambda g: (g * slope,), "leaky_relu")


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails.
    v = a.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _make(out, (a,), lambda g: (g / a.value,), "log")


def logsumexp(a: Tensor, axis: int) -> Tensor:
    """Max-shifted log-sum-exp along ``axis``; exact for finite inputs."""
    v = a.value
    m = np.max(v, axis=axis, keepdims=True)
    out = (m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))).squeeze(axis)

    def vjp(g):
        w = np.exp(v - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * w,)

    return _make(out, (a,), vjp, "logsumexp")


def softmax(a: Tensor, axis: int) -> Tensor:
    v = a.value
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _make(s, (a,), vjp, "softmax")


def concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _make(value, tuple(tensors), vjp, "concat")


def reshape(a: Tensor, shape) -> Tensor:
    value = a.value.reshape(shape)
    return _make(value, (a,), lambda g: (g.reshape(a.value.shape),), "reshape")


def _incidence(segment_ids: np.ndarray, num_segments: int) -> np.ndarray:
    """(S, E) selector matrix: row s is one on the entries of segment s.

    Segment reductions become BLAS matmuls, far faster than unbuffered
    scatter-adds; exact zeros elsewhere leave the sums bit-reproducible.
    """
    m = np.zeros((num_segments, segment_ids.size))
    m[segment_ids, np.arange(segment_ids.size)] = 1.0
    return m


def _scatter_sum(grad: np.ndarray, indices: np.ndarray, size: int, pos: int) -> np.ndarray:
    """Sum ``grad`` entries back into ``size`` slots along axis ``pos``."""
    if grad.ndim == 1:  # gathered from a 1-d tensor
        return _incidence(indices, size) @ grad
    moved = np.moveaxis(grad, pos, -2)
    lead = moved.shape[:-2]
    flat = moved.reshape(-1, moved.shape[-2], moved.shape[-1])
    out = np.matmul(_incidence(indices, size), flat)
    return np.moveaxis(out.reshape(lead + (size, moved.shape[-1])), -2, pos)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis``; backward sums gradients into the source slots."""
    indices = np.asarray(indices, dtype=np.int64)
    value = np.take(a.value, indices, axis=axis)
    pos = axis % a.value.ndim

    def vjp(g):
        return (_scatter_sum(g, indices, a.value.shape[pos], pos),)

    return _make(value, (a,), vjp, "take")


def gather_rows(a: Tensor, indices) -> Tensor:
    """Pick one entry per row: a[(B, V)], indices (B,) -> (B,)."""
    indices = np.asarray(indices, dtype=np.int64)
    if a.value.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d tensor, got {a.shape}")
    rows = np.arange(a.value.shape[0])
    value = a.value[rows, indices]

    def vjp(g):
        out = np.zeros(a.value.shape, dtype=np.float64)
        np.add.at(out, (rows, indices), g)
        return (out,)

    return _make(value, (a,), vjp, "gather_rows")


def scalar_project(a: Tensor, w: Tensor) -> Tensor:
    """Project the trailing axis onto a scalar: (..., h) x (h,) -> (...)."""
    w = _wrap(w)
    if w.value.ndim != 1 or a.value.shape[-1] != w.value.shape[0]:
        raise ShapeError(f"scalar_project: {a.shape} vs {w.shape}")
    value = a.value @ w.value

    def vjp(g):
        ga = g[..., None] * w.value
        gw = (g[..., None] * a.value).reshape(-1, w.value.shape[0]).sum(axis=0)
        return ga, gw

    return _make(value, (a, w), vjp, "scalar_project")


def tsum(a: Tensor, axis=None) -> Tensor:
    value = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy(),)

    return _make(value, (a,), vjp, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    count = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis), Tensor(1.0 / count))


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity (the same node) when not training."""
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise NumericalError("dropout in training mode requires a generator")
    if not (0.0 <= rate < 1.0):
        raise NumericalError(f"dropout rate {rate} outside [0, 1)")
    mask = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(mask))


_SEGMENT_KINDS = ("sum", "mean", "max", "lse")


def segment_aggregate(a: Tensor, kind: str, segment_ids, num_segments: int) -> Tensor:
    """Aggregate messages into segments: (..., E, F) -> (..., S, F).

    ``segment_ids`` assigns each of the E rows to a segment.  Empty
    segments yield 0 for sum/mean/lse; max over an empty segment is an
    error.  ``lse`` is max-shifted and exact for finite inputs.
    """
    if kind not in _SEGMENT_KINDS:
        raise ShapeError(f"unknown aggregation '{kind}'")
    seg = np.asarray(segment_ids, dtype=np.int64)
    v = a.value
    if v.ndim < 2:
        raise ShapeError("segment_aggregate expects (..., E, F); reshape first")
    if seg.shape != (v.shape[-2],):
        raise ShapeError(f"segment ids {seg.shape} do not match messages {v.shape}")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError("segment id out of range")

    lead = v.shape[:-2]
    E, F = v.shape[-2], v.shape[-1]
    flat = v.reshape(-1, E, F)
    L = flat.shape[0]
    counts = np.bincount(seg, minlength=num_segments)
    out_shape = lead + (num_segments, F)
    members = None
    if kind in ("max", "lse"):
        members = [np.flatnonzero(seg == s) for s in range(num_segments)]

    if kind == "sum":
        inc = _incidence(seg, num_segments)
        out = np.matmul(inc, flat)

        def vjp(g):
            return (g.reshape(L, num_segments, F)[:, seg, :].reshape(v.shape),)

        return _make(out.reshape(out_shape), (a,), vjp, "segment_sum")

    if kind == "mean":
        inc = _incidence(seg, num_segments)
        denom = np.maximum(counts, 1).astype(np.float64)[None, :, None]
        out = np.matmul(inc, flat) / denom

        def vjp(g):
            scaled = g.reshape(L, num_segments, F) / denom
            return (scaled[:, seg, :].reshape(v.shape),)

        return _make(out.reshape(out_shape), (a,), vjp, "segment_mean")

    if kind == "max":
        if np.any(counts == 0):
            empty = int(np.flatnonzero(counts == 0)[0])
            raise NumericalError(f"max aggregation over empty segment {empty}")
        out = np.empty((L, num_segments, F))
        for s, idx in enumerate(members):
            out[:, s, :] = flat[:, idx, :].max(axis=1)
        gathered = out[:, seg, :]
        # Ties and near-ties are kinks for finite differences.
        below = np.where(flat < gathered, flat, -np.inf)
        finite_gap = gathered[np.isfinite(below)] - below[np.isfinite(below)]
        if finite_gap.size:
            _note_kink(float(finite_gap.min()))
        # Route gradient to the first attaining message per segment slot.
        eidx = np.broadcast_to(np.arange(E)[None, :, None], flat.shape)
        cand = np.where(flat == gathered, eidx, E)
        winner = np.empty((L, num_segments, F), dtype=np.int64)
        for s, idx in enumerate(members):
            winner[:, s, :] = cand[:, idx, :].min(axis=1)
        is_winner = eidx == winner[:, seg, :]

        def vjp(g):
            return ((g.reshape(L, num_segments, F)[:, seg, :] * is_winner).reshape(v.shape),)

        return _make(out.reshape(out_shape), (a,), vjp, "segment_max")

    # kind == "lse"
    m_safe = np.zeros((L, num_segments, F))
    for s, idx in enumerate(members):
        if idx.size:
            m_safe[:, s, :] = flat[:, idx, :].max(axis=1)
    shifted = np.exp(flat - m_safe[:, seg, :])
    sums = np.matmul(_incidence(seg, num_segments), shifted)
    with np.errstate(divide="ignore"):
        out = np.where(counts[None, :, None] > 0, m_safe + np.log(np.maximum(sums, 1e-300)), 0.0)

    def vjp(g):
        w = shifted / np.maximum(sums, 1e-300)[:, seg, :]
        return ((g.reshape(L, num_segments, F)[:, seg, :] * w).reshape(v.shape),)

    return _make(out.reshape(out_shape), (a,), vjp, "segment_lse")


# ---------------------------------------------------------------------------
# Named trainable parameters.


class ParamStore:
    """Named map of trainable float64 arrays with their accumulated gradients."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise ShapeError(f"duplicate parameter '{name}'")
        self._values[name] = np.asarray(value, dtype=np.float64).copy()
        self._grads[name] = np.zeros_like(self._values[name])
        self._trainable[name] = bool(trainable)

    def names(self) -> tuple[str, ...]:
        return tuple(self._values)

    def trainable_names(self) -> tuple[str, ...]:
        return tuple(n for n in self._values if self._trainable[n])

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ShapeError(f"parameter '{name}': shape {arr.shape} != {self._values[name].shape}")
        self._values[name] = arr.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def leaves(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward/backward pass."""
        return {name: Tensor(value) for name, value in self._values.items()}

    def collect_grads(self, leaves: dict[str, Tensor]) -> None:
        """Copy leaf gradients back; parameters off the tape get zeros."""
        for name in self._values:
            leaf = leaves.get(name)
            if leaf is None or leaf.grad is None:
                self._grads[name] = np.zeros_like(self._values[name])
            else:
                self._grads[name] = np.asarray(leaf.grad, dtype=np.float64)

    def zero_grads(self) -> None:
        for name in self._grads:
            self._grads[name] = np.zeros_like(self._values[name])

    # Flat-vector view over trainable parameters, for quasi-newton fitting.

    def flat_values(self) -> np.ndarray:
        names = self.trainable_names()
        if not names:
            return np.zeros(0)
        return np.concatenate([self._values[n].reshape(-1) for n in names])

    def flat_grads(self) -> np.ndarray:
        names = self.trainable_names()
        if not names:
            return np.zeros(0)
        return np.concatenate([self._grads[n].reshape(-1) for n in names])

    def set_flat_values(self, vec: np.ndarray) -> None:
        offset = 0
        for name in self.trainable_names():
            size = self._values[name].size
            self._values[name] = np.asarray(vec[offset : offset + size], dtype=np.float64).reshape(
                self._values[name].shape
            )
            offset += size
        if offset != vec.size:
            raise ShapeError(f"flat vector length {vec.size} != parameter count {offset}")

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self._values.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name, value in snap.items():
            self.set_value(name, value)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value, trainable=self._trainable[name])
        return out

    # Flat key -> array serialization (portable text).

    def to_payload(self) -> dict:
        return {
            name: {
                "shape": list(value.shape),
                "data": [float(x) for x in value.reshape(-1)],
                "trainable": self._trainable[name],
            }
            for name, value in self._values.items()
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "ParamStore":
        store = cls()
        for name, entry in payload.items():
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            store.add(name, arr, trainable=bool(entry.get("trainable", True)))
        return store

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_payload(), fh)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path) as fh:
            return cls.from_payload(json.load(fh))
