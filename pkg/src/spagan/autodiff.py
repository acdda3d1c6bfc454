"""Dense-matrix reverse-mode autodiff with segment (group-wise) operations.

Every value is a 2-D numpy array. Operations executed while gradients are
enabled append a node to the active :class:`Tape`; :func:`backward` replays
the tape in reverse and accumulates gradients into leaf tensors.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp


class DimensionError(ValueError):
    """Operand shapes are not conformant for the requested operation."""


class DegenerateGroupError(ValueError):
    """A segment softmax was asked to normalize over an empty group."""


class UsageError(RuntimeError):
    pass


_ids = itertools.count()


class Tensor:
    """A dense matrix that can take part in reverse-mode differentiation."""

    __slots__ = ("value", "_grad", "requires_grad", "id", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        if sp.issparse(value):
            # constant sparse inputs only (e.g. bag-of-words features)
            if requires_grad:
                raise UsageError("sparse tensors cannot require gradients")
            self.value = sp.csr_matrix(value)
            self._grad = None
            self.requires_grad = False
            self.id = next(_ids)
            self.name = name
            return
        arr = np.asarray(value)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are matrices, got ndim={arr.ndim}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.value = arr
        self._grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.value)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray | None) -> None:
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise UsageError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Computation record
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only list of executed operations, in execution order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.enabled = True

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.nodes.append(Node(op, inputs, output, backward))

    def clear(self) -> None:
        self.nodes.clear()

    def check_order(self) -> bool:
        """True iff every operand was produced earlier on the tape (or is a leaf)."""
        produced_at = {node.output.id: t for t, node in enumerate(self.nodes)}
        for t, node in enumerate(self.nodes):
            for inp in node.inputs:
                if produced_at.get(inp.id, -1) >= t:
                    return False
        return True


_active_tape = Tape()


def get_tape() -> Tape:
    return _active_tape


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    global _active_tape
    prev, _active_tape = _active_tape, tape
    try:
        yield tape
    finally:
        _active_tape = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = get_tape()
    prev, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = prev


def _result(op: str, value: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    tape = get_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, backward)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every requires-grad leaf.

    Intermediate gradients are released and the tape is cleared afterwards.
    """
    tape = tape if tape is not None else get_tape()
    if loss.shape != (1, 1):
        raise UsageError(f"backward() needs a scalar (1x1) loss, got {loss.shape}")
    produced = {node.output.id for node in tape.nodes}
    loss._grad = np.ones_like(loss.value) + (loss._grad if loss._grad is not None else 0)
    touched: list[Tensor] = []
    for node in reversed(tape.nodes):
        g = node.output._grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._grad is None:
                inp._grad = np.array(gi, dtype=inp.value.dtype, copy=True)
                touched.append(inp)
            else:
                inp._grad += gi
    for t in touched:
        if t.id in produced:
            t._grad = None
    for node in tape.nodes:
        node.output._grad = None
    tape.clear()


# ---------------------------------------------------------------------------
# Segment index
# ---------------------------------------------------------------------------


class SegmentIndex:
    """Assignment of each operand row to one of ``num_groups`` groups."""

    def __init__(self, groups, num_groups: int | None = None):
        groups = np.asarray(groups, dtype=np.int64).ravel()
        if num_groups is None:
            num_groups = int(groups.max()) + 1 if groups.size else 0
        if groups.size and (groups.min() < 0 or groups.max() >= num_groups):
            raise ValueError("group ids must lie in [0, num_groups)")
        self.groups = groups
        self.num_groups = int(num_groups)
        self.counts = np.bincount(groups, minlength=self.num_groups)
        self._matrix: sp.csr_matrix | None = None
        self._sorted = bool(np.all(groups[1:] >= groups[:-1])) if groups.size else True

    def __len__(self) -> int:
        return self.groups.size

    @property
    def matrix(self) -> sp.csr_matrix:
        """Indicator matrix of shape (num_groups, num_elements)."""
        if self._matrix is None:
            n = self.groups.size
            self._matrix = sp.csr_matrix(
                (np.ones(n), (self.groups, np.arange(n))), shape=(self.num_groups, n)
            )
        return self._matrix

    def sum(self, x: np.ndarray) -> np.ndarray:
        out = self.matrix @ x
        return np.asarray(out, dtype=x.dtype)

    def max(self, x: np.ndarray) -> np.ndarray:
        """Per-group max of a column; empty groups get -inf."""
        out = np.full((self.num_groups, x.shape[1]), -np.inf, dtype=x.dtype)
        if not x.size:
            return out
        if self._sorted:
            starts = np.flatnonzero(np.r_[True, self.groups[1:] != self.groups[:-1]])
            out[self.groups[starts]] = np.maximum.reduceat(x, starts, axis=0)
        else:
            np.maximum.at(out, self.groups, x)
        return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul {a.shape} x {b.shape}")
    if b.is_sparse:
        raise UsageError("only the left matmul operand may be sparse")
    av, bv = a.value, b.value

    def bw(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = np.asarray(av.T @ g) if b.requires_grad else None
        return ga, gb

    out = av @ bv
    return _result("matmul", np.asarray(out), (a, b), bw)


def _broadcast_column(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` is a column broadcast across ``a``'s columns."""
    if a.shape == b.shape:
        return False
    if b.cols == 1 and b.rows == a.rows:
        return True
    raise DimensionError(f"{op} {a.shape} with {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    col = _broadcast_column(a, b, "add")

    def bw(g):
        gb = g.sum(axis=1, keepdims=True) if col else g
        return g, gb

    return _result("add", a.value + b.value, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may be a column broadcast over ``a``."""
    col = _broadcast_column(a, b, "mul")
    av, bv = a.value, b.value

    def bw(g):
        ga = g * bv if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * av
            if col:
                gb = gb.sum(axis=1, keepdims=True)
        return ga, gb

    return _result("mul", av * bv, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    return _result("scale", a.value * s, (a,), lambda g: (g * s,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slopes = np.where(a.value > 0, 1.0, slope).astype(a.dtype)
    return _result("leaky_relu", a.value * slopes, (a,), lambda g: (g * slopes,))


def elu(a: Tensor) -> Tensor:
    x = a.value
    neg = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg)
    deriv = np.where(x > 0, 1.0, neg + 1.0).astype(a.dtype)
    return _result("elu", out, (a,), lambda g: (g * deriv,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row counts differ: {sorted(rows)}")
    bounds = np.cumsum([0] + [p.cols for p in parts])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result("concat_cols", np.concatenate([p.value for p in parts], axis=1), parts, bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.cols:
        raise DimensionError(f"column slice [{start}:{stop}] of {a.shape}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[:, start:stop] = g
        return (out,)

    return _result("slice_cols", a.value[:, start:stop], (a,), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows column counts differ: {sorted(cols)}")
    bounds = np.cumsum([0] + [p.rows for p in parts])

    def bw(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result("concat_rows", np.concatenate([p.value for p in parts], axis=0), parts, bw)


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    n = a.rows

    def bw(g):
        # bincount-based scatter-add; much faster than np.add.at
        out = np.empty((n, g.shape[1]), dtype=g.dtype)
        for j in range(g.shape[1]):
            out[:, j] = np.bincount(index, weights=g[:, j], minlength=n)
        return (out,)

    return _result("gather_rows", a.value[index], (a,), bw)


def segment_sum(a: Tensor, seg: SegmentIndex) -> Tensor:
    if a.rows != len(seg):
        raise DimensionError(f"segment_sum over {len(seg)} elements, operand has {a.rows} rows")
    return _result("segment_sum", seg.sum(a.value), (a,), lambda g: (g[seg.groups],))


def segment_mean(a: Tensor, seg: SegmentIndex) -> Tensor:
    if a.rows != len(seg):
        raise DimensionError(f"segment_mean over {len(seg)} elements, operand has {a.rows} rows")
    inv = 1.0 / np.maximum(seg.counts, 1)
    inv = inv.astype(a.dtype)[:, None]
    out = seg.sum(a.value) * inv

    def bw(g):
        return ((g * inv)[seg.groups],)

    return _result("segment_mean", out, (a,), bw)


def segment_softmax(logits: Tensor, seg: SegmentIndex) -> Tensor:
    """Softmax of a column, normalized independently within each group."""
    if logits.cols != 1:
        raise DimensionError(f"segment_softmax needs a column, got {logits.shape}")
    if logits.rows != len(seg):
        raise DimensionError(f"segment_softmax over {len(seg)} elements, got {logits.rows} rows")
    if np.any(seg.counts == 0):
        empty = int(np.flatnonzero(seg.counts == 0)[0])
        raise DegenerateGroupError(f"group {empty} is empty")
    x = logits.value
    shifted = x - seg.max(x)[seg.groups]
    e = np.exp(shifted)
    y = e / seg.sum(e)[seg.groups]

    def bw(g):
        dot = seg.sum(g * y)[seg.groups]
        return (y * (g - dot),)

    return _result("segment_softmax", y, (logits,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.value
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _result("log_softmax_rows", out, (a,), bw)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Column of entries ``a[rows[t], cols[t]]``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _result("pick", a.value[rows, cols][:, None], (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    out = np.array([[a.value.sum()]], dtype=a.dtype)
    return _result("sum_all", out, (a,), lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.value.size)


def dropout(a: Tensor, keep_prob: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: kept entries are scaled by ``1/keep_prob``."""
    if not (0.0 < keep_prob <= 1.0):
        raise ValueError(f"keep probability must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return a
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    if a.is_sparse:
        # zeros stay zero, so only stored entries need a mask
        x = a.value.copy()
        keep = rng.random(x.data.shape) < keep_prob
        x.data = x.data * keep / keep_prob
        return Tensor(x)
    mask = (rng.random(a.shape, dtype=np.float32 if a.dtype == np.float32 else np.float64) < keep_prob)
    mask = mask.astype(a.dtype) / keep_prob
    return _result("dropout", a.value * mask, (a,), lambda g: (g * mask,))


def elementwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch to one of the elementwise/structural op kinds by name."""
    table = {
        "add": add,
        "mul": mul,
        "leaky_relu": leaky_relu,
        "elu": elu,
        "concat-cols": lambda *ts: concat_cols(ts),
        "scale": scale,
        "log-softmax-rows": log_softmax_rows,
        "segment-sum": segment_sum,
        "segment-mean": segment_mean,
        "row-gather": gather_rows,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*operands, **kwargs)
