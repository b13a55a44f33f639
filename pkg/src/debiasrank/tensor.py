"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every op returns a new Tensor whose ``op_record``
remembers the producing op and its inputs, and ``backward`` walks that record
graph in reverse topological order. Everything is float64; desk-scale model
sizes make speed irrelevant and the gradient checks need the precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor-engine errors."""


class ShapeMismatchError(TensorError):
    """Operands do not conform for the requested op."""


class DomainError(TensorError):
    """Input value outside the mathematical domain of the op."""


class GraphError(TensorError):
    """Graph-level contract violated (e.g. backward on a non-scalar root)."""


class OpRecord:
    """Producing op of a non-leaf tensor: op name plus input tensors."""

    __slots__ = ("op", "inputs")

    def __init__(self, op: str, inputs: tuple["Tensor", ...]):
        self.op = op
        self.inputs = inputs

    def __repr__(self):
        return f"OpRecord({self.op}, {len(self.inputs)} inputs)"


# backward closures return one gradient array (or None) per op input
BackwardFn = Callable[[np.ndarray], tuple]


class Tensor:
    """N-dimensional float64 value node, optionally carrying a gradient.

    Values are immutable by convention once created; the optimizer mutates
    leaf parameters in place between graph builds, and grad accumulation is
    the only sanctioned mutation during backward.
    """

    __slots__ = ("values", "requires_grad", "op_record", "_grad", "_backward")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op_record: OpRecord | None = None
        self._grad: np.ndarray | None = None
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.op_record is None

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; reads as zeros when never populated."""
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    @property
    def grad_populated(self) -> bool:
        return self._grad is not None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        self._grad += g

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def item(self) -> float:
        if self.values.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        op = self.op_record.op if self.op_record else "leaf"
        return f"Tensor(shape={self.shape}, {op}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    """Leaf tensor that never receives gradient."""
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    """Leaf tensor that participates in optimization."""
    return Tensor(values, requires_grad=True)


def _result(op: str, inputs: Sequence[Tensor], values: np.ndarray,
            backward_fn: BackwardFn) -> Tensor:
    out = Tensor(values)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op_record = OpRecord(op, tuple(inputs))
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.values + b.values

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _result("add", (a, b), out, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    out = a.values - b.values

    def backward_fn(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _result("sub", (a, b), out, backward_fn)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul_elementwise", a, b)
    out = a.values * b.values

    def backward_fn(g):
        return (_unbroadcast(g * b.values, a.shape),
                _unbroadcast(g * a.values, b.shape))

    return _result("mul_elementwise", (a, b), out, backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.values * c

    def backward_fn(g):
        return (g * c,)

    return _result("scale", (a,), out, backward_fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def backward_fn(g):
        return (g * (1.0 - out * out),)

    return _result("tanh", (a,), out, backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form avoids overflow in exp for large-magnitude inputs
    out = 0.5 * (1.0 + np.tanh(0.5 * a.values))

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _result("sigmoid", (a,), out, backward_fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise DomainError(f"log: non-positive input (min value {float(a.values.min())})")
    out = np.log(a.values)

    def backward_fn(g):
        return (g / a.values,)

    return _result("log", (a,), out, backward_fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through unclipped entries."""
    out = np.clip(a.values, lo, hi)
    passthrough = ((a.values >= lo) & (a.values <= hi)).astype(np.float64)

    def backward_fn(g):
        return (g * passthrough,)

    return _result("clip", (a,), out, backward_fn)


def softmax_lastdim(a: Tensor) -> Tensor:
    if a.values.ndim < 1:
        raise ShapeMismatchError("softmax_lastdim: needs at least 1 dimension")
    shifted = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _result("softmax_lastdim", (a,), out, backward_fn)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly
    or be absent on one side (no other batch broadcasting)."""
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeMismatchError(f"matmul: operands must be >=2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        raise ShapeMismatchError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    if bv.ndim == 2 and av.ndim > 2:
        # flatten the batch into one GEMM
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            bt = np.swapaxes(bv, -1, -2)
            if bv.ndim == 2 and g.ndim > 2:
                ga = (g.reshape(-1, g.shape[-1]) @ bt).reshape(av.shape)
            else:
                ga = g @ bt
                if ga.ndim > av.ndim:
                    ga = ga.sum(axis=tuple(range(ga.ndim - av.ndim)))
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                k = av.shape[-1]
                gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
                if gb.ndim > bv.ndim:
                    gb = gb.sum(axis=tuple(range(gb.ndim - bv.ndim)))
        return (ga, gb)

    return _result("matmul", (a, b), out, backward_fn)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.values.ndim < 2:
        raise ShapeMismatchError(f"transpose: needs >=2-D, got {a.shape}")
    out = np.swapaxes(a.values, -1, -2)

    def backward_fn(g):
        return (np.swapaxes(g, -1, -2),)

    return _result("transpose", (a,), out, backward_fn)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.values.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _result("reshape", (a,), out, backward_fn)


def moveaxis(a: Tensor, source: int, dest: int) -> Tensor:
    out = np.moveaxis(a.values, source, dest)

    def backward_fn(g):
        return (np.moveaxis(g, dest, source),)

    return _result("moveaxis", (a,), out, backward_fn)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(tensors)
    if not ts:
        raise ShapeMismatchError("concat: empty input list")
    out = np.concatenate([t.values for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]

    def backward_fn(g):
        grads = []
        offset = 0
        for t, n in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            grads.append(g[tuple(idx)])
            offset += n
        return tuple(grads)

    return _result("concat", ts, out, backward_fn)


def sum_lastdim(a: Tensor) -> Tensor:
    if a.values.ndim < 1:
        raise ShapeMismatchError("sum_lastdim: needs at least 1 dimension")
    out = a.values.sum(axis=-1)

    def backward_fn(g):
        return (np.broadcast_to(g[..., None], a.shape).copy(),)

    return _result("sum_lastdim", (a,), out, backward_fn)


def mean_lastdim(a: Tensor) -> Tensor:
    if a.values.ndim < 1:
        raise ShapeMismatchError("mean_lastdim: needs at least 1 dimension")
    n = a.shape[-1]
    out = a.values.mean(axis=-1)

    def backward_fn(g):
        return (np.broadcast_to(g[..., None] / n, a.shape).copy(),)

    return _result("mean_lastdim", (a,), out, backward_fn)


def take_index(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one index along an axis, dropping that axis."""
    out = np.take(a.values, index, axis=axis)

    def backward_fn(g):
        full = np.zeros_like(a.values)
        idx = [slice(None)] * a.values.ndim
        idx[axis] = index
        full[tuple(idx)] = g
        return (full,)

    return _result("take_index", (a,), out, backward_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table by integer id; grads scatter-add back."""
    if table.values.ndim != 2:
        raise ShapeMismatchError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}), "
            f"got min {ids.min()} max {ids.max()}")
    out = table.values[ids]

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result("embedding_lookup", (table,), out, backward_fn)


def dropout(a: Tensor, rate: float, seed: int, training: bool) -> Tensor:
    """Inverted dropout with a per-op deterministic seed.

    Identity in inference mode; in training mode kept entries are scaled by
    1/(1-rate) so expectations match.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    rng = np.random.default_rng(seed)
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    out = a.values * keep

    def backward_fn(g):
        return (g * keep,)

    return _result("dropout", (a,), out, backward_fn)


def gradient_reversal(a: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -lam."""
    if lam < 0:
        raise DomainError(f"gradient_reversal: lambda must be >= 0, got {lam}")
    out = a.values

    def backward_fn(g):
        return (-lam * g,)

    return _result("gradient_reversal", (a,), out, backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate grads of all leaves reachable from a scalar root.

    Leaf grads accumulate across repeated calls; intermediate gradients live
    in a per-call buffer, so calling twice doubles leaf grads exactly.
    Leaves not reachable from the root are left untouched (their grad reads
    as zero).
    """
    if root.values.size != 1:
        raise GraphError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    # iterative post-order DFS over grad-requiring nodes
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.op_record is not None:
            for child in node.op_record.inputs:
                if child.requires_grad and id(child) not in seen:
                    stack.append((child, False))

    buffer: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    placed: set[int] = {id(buffer[id(root)])}
    for node in reversed(topo):
        g = buffer.pop(id(node), None)
        if g is None:
            continue
        placed.discard(id(g))
        if node.op_record is None:
            node.accumulate_grad(g)
            continue
        input_grads = node._backward(g)
        for child, cg in zip(node.op_record.inputs, input_grads):
            if cg is None or not child.requires_grad:
                continue
            slot = buffer.get(id(child))
            if slot is None:
                # own the stored array: copy views and arrays already
                # handed to another slot (e.g. add returns g twice)
                if cg.base is not None or id(cg) in placed:
                    cg = np.array(cg, dtype=np.float64)
                buffer[id(child)] = cg
                placed.add(id(cg))
            else:
                slot += cg
