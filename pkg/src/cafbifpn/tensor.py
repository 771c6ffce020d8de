"""Dense tensor values, reverse-mode differentiation on an explicit tape,
and the deterministic fixture RNG.

Tensors are immutable after construction and every operation is a pure
function, so values may be shared freely between threads.  A Tape is
single-writer: recording and backward must be serialized per tape.

Verification arithmetic is float64; float32 exists as a storage dtype and
is rejected on tapes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError
from .instrumentation import active_kink_monitor

_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}


class Tensor:
    """Immutable dense array, row-major, float32 or float64.

    Scalars are represented with dims (1,); dims are never empty and every
    extent is at least 1.
    """

    __slots__ = ("array",)

    def __init__(self, data, dtype: str | None = None, copy: bool = True):
        np_dtype = _DTYPES[dtype] if dtype is not None else None
        arr = np.array(data, dtype=np_dtype, order="C", copy=copy)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0 or min(arr.shape) < 1:
            raise ShapeError(f"tensor extents must all be >= 1, got {arr.shape}")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def dtype(self) -> str:
        return str(self.array.dtype)

    @property
    def rank(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.array.reshape(-1)[0])

    def tolist(self):
        return self.array.tolist()

    def astype(self, dtype: str) -> "Tensor":
        return Tensor(self.array.astype(_DTYPES[dtype]), copy=False)

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.dtype})"


def tensor(data, dtype: str = "float64") -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(dims: Sequence[int], dtype: str = "float64") -> Tensor:
    return Tensor(np.zeros(tuple(dims), dtype=_DTYPES[dtype]), copy=False)


def full(dims: Sequence[int], value: float, dtype: str = "float64") -> Tensor:
    return Tensor(np.full(tuple(dims), value, dtype=_DTYPES[dtype]), copy=False)


def from_flat(values: Iterable[float], dims: Sequence[int], dtype: str = "float64") -> Tensor:
    arr = np.asarray(list(values), dtype=_DTYPES[dtype]).reshape(tuple(dims))
    return Tensor(arr, copy=False)


# ---------------------------------------------------------------------------
# Tape and nodes


class Node:
    """A value recorded on a tape, carrying parent links for backward."""

    __slots__ = ("tape", "index", "value", "parents", "_grads_fn")

    def __init__(self, tape, index, value, parents, grads_fn):
        self.tape = tape
        self.index = index
        self.value = value  # np.ndarray, float64
        self.parents = parents
        self._grads_fn = grads_fn

    @property
    def dims(self) -> tuple[int, ...]:
        return self.value.shape

    def tensor(self) -> Tensor:
        return Tensor(self.value, copy=True)

    def __repr__(self) -> str:
        return f"Node(index={self.index}, dims={self.dims})"


class Tape:
    """Ordered operation record; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, t: Tensor) -> Node:
        if t.dtype != "float64":
            raise NumericError("tape arithmetic is float64-only; convert leaves first")
        return self._record(np.array(t.array, dtype=np.float64), (), None)

    def _record(self, value: np.ndarray, parents, grads_fn) -> Node:
        node = Node(self, len(self.nodes), np.ascontiguousarray(value), parents, grads_fn)
        self.nodes.append(node)
        return node

    def backward(self, output: Node, seed: Tensor) -> dict[Node, Tensor]:
        """Gradient of (seed . output) with respect to every reached node.

        Visits nodes in reverse creation order, accumulating (never
        overwriting) each node's gradient slot, so fan-out is correct and
        runs are deterministic.
        """
        if not isinstance(output, Node) or output.tape is not self:
            raise GraphError("output node is not recorded on this tape")
        if tuple(seed.dims) != output.dims:
            raise ShapeError(f"seed dims {seed.dims} != output dims {output.dims}")
        slots: dict[int, np.ndarray] = {output.index: np.array(seed.array, dtype=np.float64)}
        for idx in range(output.index, -1, -1):
            g = slots.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            if not node.parents:
                continue
            for parent, pg in zip(node.parents, node._grads_fn(g)):
                if not isinstance(parent, Node) or pg is None:
                    continue
                slot = slots.get(parent.index)
                if slot is None:
                    slots[parent.index] = np.array(pg, dtype=np.float64)
                else:
                    slot += pg
        return {self.nodes[i]: Tensor(g, copy=False) for i, g in slots.items()}


def backward(tape: Tape, output: Node, seed: Tensor) -> dict[Node, Tensor]:
    return tape.backward(output, seed)


# ---------------------------------------------------------------------------
# Primitive dispatch

TensorLike = "Tensor | Node"


def _val(a) -> np.ndarray:
    if isinstance(a, Node):
        return a.value
    if isinstance(a, Tensor):
        return a.array
    raise TypeError(f"expected Tensor or Node, got {type(a).__name__}")


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise GraphError("operands are recorded on different tapes")
    return tape


def _emit(args, value: np.ndarray, grads_fn: Callable | None):
    tape = _tape_of(args)
    if tape is None:
        return Tensor(value, copy=False)
    return tape._record(value, tuple(args), grads_fn)


def _same_layout(a, b, op: str) -> None:
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ShapeError(f"{op}: dims {list(av.shape)} vs {list(bv.shape)}")
    if av.dtype != bv.dtype:
        raise ShapeError(f"{op}: dtype {av.dtype} vs {bv.dtype}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b):
    _same_layout(a, b, "add")
    return _emit((a, b), _val(a) + _val(b), lambda g: (g, g))


def sub(a, b):
    _same_layout(a, b, "sub")
    return _emit((a, b), _val(a) - _val(b), lambda g: (g, -g))


def mul(a, b):
    _same_layout(a, b, "mul")
    av, bv = _val(a), _val(b)
    return _emit((a, b), av * bv, lambda g: (g * bv, g * av))


def div(a, b):
    _same_layout(a, b, "div")
    av, bv = _val(a), _val(b)
    return _emit((a, b), av / bv, lambda g: (g / bv, -g * av / (bv * bv)))


def scale(a, c: float):
    """Multiply by a python constant (no gradient for the constant)."""
    c = float(c)
    return _emit((a,), _val(a) * c, lambda g: (g * c,))


def relu(a):
    av = _val(a)
    monitor = active_kink_monitor()
    if monitor is not None:
        monitor.record_relu(av)
    mask = av > 0
    return _emit((a,), np.where(mask, av, 0.0), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {list(av.shape)} and {list(bv.shape)}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {list(av.shape)} x {list(bv.shape)}")
    if av.dtype != bv.dtype:
        raise ShapeError(f"matmul: dtype {av.dtype} vs {bv.dtype}")
    return _emit((a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def softmax_lastdim(a):
    av = _val(a)
    if not np.all(np.isfinite(av)):
        raise NumericError("softmax input contains non-finite values")
    shifted = av - av.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grads(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return ((g - inner) * s,)

    return _emit((a,), s, grads)


# ---------------------------------------------------------------------------
# Structural ops


def reshape(a, dims: Sequence[int]):
    av = _val(a)
    dims = tuple(int(d) for d in dims)
    if any(d < 1 for d in dims) or not dims:
        raise ShapeError(f"reshape target {list(dims)} has invalid extents")
    if math.prod(dims) != av.size:
        raise ShapeError(f"reshape {list(av.shape)} -> {list(dims)} changes element count")
    old = av.shape
    return _emit((a,), av.reshape(dims), lambda g: (g.reshape(old),))


def permute(a, axes: Sequence[int]):
    av = _val(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(av.ndim)):
        raise ShapeError(f"permute axes {list(axes)} is not a permutation of rank {av.ndim}")
    inverse = np.argsort(axes)
    return _emit((a,), np.ascontiguousarray(av.transpose(axes)),
                 lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def concat_axis(parts: Sequence, axis: int):
    if not parts:
        raise ShapeError("concat_axis needs at least one input")
    vals = [_val(p) for p in parts]
    rank = vals[0].ndim
    if axis < 0 or axis >= rank:
        raise ShapeError(f"concat axis {axis} out of range for rank {rank}")
    for v in vals[1:]:
        if v.ndim != rank or any(v.shape[i] != vals[0].shape[i] for i in range(rank) if i != axis):
            raise ShapeError(f"concat inputs disagree off-axis: {list(vals[0].shape)} vs {list(v.shape)}")
    extents = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + extents)

    def grads(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(vals))
        )

    return _emit(tuple(parts), np.concatenate(vals, axis=axis), grads)


def slice_axes(a, slices: Sequence[slice]):
    """Strided view of the leading axes; missing trailing axes are full."""
    av = _val(a)
    if len(slices) > av.ndim:
        raise ShapeError(f"{len(slices)} slices for rank {av.ndim}")
    for s in slices:
        if s.step is not None and s.step < 1:
            raise ShapeError("slice step must be >= 1")
    key = tuple(slices)
    out = np.ascontiguousarray(av[key])
    if out.size == 0:
        raise ShapeError(f"slice {key} selects nothing from dims {list(av.shape)}")
    shape = av.shape

    def grads(g):
        buf = np.zeros(shape, dtype=g.dtype)
        buf[key] += g
        return (buf,)

    return _emit((a,), out, grads)


def expand(a, dims: Sequence[int]):
    """Broadcast to dims (numpy rules); backward sums over broadcast axes."""
    av = _val(a)
    dims = tuple(int(d) for d in dims)
    try:
        out = np.broadcast_to(av, dims)
    except ValueError as exc:
        raise ShapeError(f"cannot expand {list(av.shape)} to {list(dims)}") from exc
    lead = len(dims) - av.ndim
    summed_axes = tuple(range(lead)) + tuple(
        lead + i for i, e in enumerate(av.shape) if e == 1 and dims[lead + i] != 1
    )
    shape = av.shape

    def grads(g):
        r = g.sum(axis=summed_axes) if summed_axes else g
        return (r.reshape(shape),)

    return _emit((a,), np.ascontiguousarray(out), grads)


# ---------------------------------------------------------------------------
# Reductions and gather


def reduce_mean_axis(a, axis: int):
    av = _val(a)
    if axis < 0 or axis >= av.ndim:
        raise ShapeError(f"mean axis {axis} out of range for rank {av.ndim}")
    n = av.shape[axis]
    out = av.mean(axis=axis)
    if out.ndim == 0:
        out = out.reshape(1)
    shape = av.shape

    def grads(g):
        gg = g.reshape([e for i, e in enumerate(shape) if i != axis])
        return (np.ascontiguousarray(np.broadcast_to(np.expand_dims(gg, axis), shape)) / n,)

    return _emit((a,), out, grads)


def sum_all(a):
    av = _val(a)
    shape = av.shape
    return _emit((a,), np.array([av.sum()]),
                 lambda g: (np.full(shape, g[0], dtype=np.float64),))


def gather_flat(a, indices: np.ndarray, out_dims: Sequence[int]):
    """result.flat[i] = a.flat[indices.flat[i]]; backward scatter-adds."""
    av = _val(a)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= av.size):
        raise IndexError(f"gather index out of range for {av.size} elements")
    out_dims = tuple(int(d) for d in out_dims)
    if math.prod(out_dims) != idx.size:
        raise ShapeError(f"gather output dims {list(out_dims)} disagree with {idx.size} indices")
    out = av.reshape(-1)[idx].reshape(out_dims)
    size, shape = av.size, av.shape

    def grads(g):
        buf = np.zeros(size, dtype=np.float64)
        np.add.at(buf, idx, g.reshape(-1))
        return (buf.reshape(shape),)

    return _emit((a,), out, grads)


# ---------------------------------------------------------------------------
# SplitMix64: the deterministic cross-platform fixture RNG

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TO_UNIT = 2.0 ** -53


def rng_next_raw(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new state, raw 64-bit output)."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    z = z ^ (z >> 31)
    return state, z


def rng_next(state: int) -> tuple[int, float]:
    """One step yielding a float64 uniform in [0, 1)."""
    state, z = rng_next_raw(state)
    return state, (z >> 11) * _TO_UNIT


class Rng:
    """Convenience stream over rng_next with a mutable cursor."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_float(self) -> float:
        self.state, u = rng_next(self.state)
        return u

    def uniform(self, low: float, high: float) -> float:
        return low + (high - low) * self.next_float()

    def tensor(self, dims: Sequence[int], low: float = 0.0, high: float = 1.0) -> Tensor:
        n = math.prod(dims)
        vals = np.empty(n, dtype=np.float64)
        for i in range(n):
            vals[i] = self.uniform(low, high)
        return Tensor(vals.reshape(tuple(dims)), copy=False)

    def symmetric_unit(self, dims: Sequence[int]) -> Tensor:
        """Values 2u - 1, filling row-major."""
        n = math.prod(dims)
        vals = np.empty(n, dtype=np.float64)
        for i in range(n):
            vals[i] = 2.0 * self.next_float() - 1.0
        return Tensor(vals.reshape(tuple(dims)), copy=False)

    def randint(self, bound: int) -> int:
        return int(self.next_float() * bound)
