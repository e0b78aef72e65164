"""Small reverse-mode autodiff layer over float64 numpy arrays.

Operations are methods of :class:`Graph`.  A recording graph appends one
node per executed op whose output needs a gradient; :meth:`Graph.backward`
replays those nodes in reverse append order.  A non-recording graph
(``Graph(record=False)``) runs the same code path forward-only, which is
what decoding and finite-difference probing use.

Broadcasting is deliberately narrow: binary ops accept equal shapes or a
scalar operand.  Row broadcasting of biases goes through the explicit
:meth:`Graph.tile_rows` op.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GraphError, NonFiniteError, ShapeError

_EXP_MAX = 709.0


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Graph:
    """Ordered record of executed operations.

    ``record=False`` turns every op into a plain numpy evaluation.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = Tensor(data)
        if self.record and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self.nodes.append(Node(out, inputs, backward, op))
        return out

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        ad, bd = a.data, b.data

        def backward(g):
            return g @ bd.T, ad.T @ g

        return self._emit(ad @ bd, (a, b), backward, "matmul")

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
        return self._emit(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")

    # -- elementwise ----------------------------------------------------

    def _binary_shapes(self, op: str, a: Tensor, b: Tensor) -> None:
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}")

    @staticmethod
    def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
        if g.shape == t.shape:
            return g
        return np.asarray(g.sum()).reshape(t.shape)

    def add(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        self._binary_shapes("add", a, b)

        def backward(g):
            return self._reduce_to(g, a), self._reduce_to(g, b)

        return self._emit(a.data + b.data, (a, b), backward, "add")

    def sub(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        self._binary_shapes("sub", a, b)

        def backward(g):
            return self._reduce_to(g, a), self._reduce_to(-g, b)

        return self._emit(a.data - b.data, (a, b), backward, "sub")

    def mul(self, a, b) -> Tensor:
        a, b = _as_tensor(a), _as_tensor(b)
        self._binary_shapes("mul", a, b)
        ad, bd = a.data, b.data

        def backward(g):
            return self._reduce_to(g * bd, a), self._reduce_to(g * ad, b)

        return self._emit(ad * bd, (a, b), backward, "mul")

    def neg(self, a: Tensor) -> Tensor:
        return self._emit(-a.data, (a,), lambda g: (-g,), "neg")

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)
        return self._emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self, a: Tensor) -> Tensor:
        y = _sigmoid(a.data)
        return self._emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def log(self, a: Tensor) -> Tensor:
        if (a.data <= 0).any():
            raise DomainError("log of a non-positive value")
        x = a.data
        return self._emit(np.log(x), (a,), lambda g: (g / x,), "log")

    def exp(self, a: Tensor) -> Tensor:
        if (a.data > _EXP_MAX).any():
            raise DomainError(f"exp argument above {_EXP_MAX} would overflow")
        y = np.exp(a.data)
        return self._emit(y, (a,), lambda g: (g * y,), "exp")

    def blend(self, mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
        """``mask * a + (1 - mask) * b`` with a constant 0/1 mask.

        The mask broadcasts along trailing axes (e.g. a ``[B, 1]`` mask
        against ``[B, H]`` states).
        """
        if a.shape != b.shape:
            raise ShapeError(f"blend: shapes {a.shape} and {b.shape} differ")
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)

        def backward(g):
            return g * m, g * (1.0 - m)

        return self._emit(m * a.data + (1.0 - m) * b.data, (a, b), backward, "blend")

    # -- reductions and reshaping ----------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._emit(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")

    def reshape(self, a: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = a.shape
        try:
            out = a.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
        return self._emit(out, (a,), lambda g: (g.reshape(old),), "reshape")

    def tile_rows(self, v: Tensor, n: int) -> Tensor:
        """Repeat a vector into ``n`` identical rows."""
        if v.data.ndim != 1:
            raise ShapeError(f"tile_rows expects a vector, got shape {v.shape}")
        out = np.tile(v.data, (n, 1))
        return self._emit(out, (v,), lambda g: (g.sum(axis=0),), "tile_rows")

    def expand_mid(self, a: Tensor, n: int) -> Tensor:
        """``[B, D] -> [B, n, D]`` by repetition along a new middle axis."""
        if a.data.ndim != 2:
            raise ShapeError(f"expand_mid expects a matrix, got shape {a.shape}")
        out = np.repeat(a.data[:, None, :], n, axis=1)
        return self._emit(out, (a,), lambda g: (g.sum(axis=1),), "expand_mid")

    def concat(self, parts: Sequence[Tensor]) -> Tensor:
        """Concatenate along the last axis."""
        lead = parts[0].shape[:-1]
        for p in parts:
            if p.shape[:-1] != lead:
                raise ShapeError(f"concat: leading shapes differ: {[q.shape for q in parts]}")
        widths = [p.shape[-1] for p in parts]
        bounds = np.cumsum([0] + widths)

        def backward(g):
            return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))]

        out = np.concatenate([p.data for p in parts], axis=-1)
        return self._emit(out, tuple(parts), backward, "concat")

    def slice_last(self, a: Tensor, start: int, stop: int) -> Tensor:
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            full[..., start:stop] = g
            return (full,)

        return self._emit(a.data[..., start:stop].copy(), (a,), backward, "slice_last")

    def stack_mid(self, parts: Sequence[Tensor]) -> Tensor:
        """Stack ``n`` tensors of shape ``[B, D]`` into ``[B, n, D]``."""
        shape = parts[0].shape
        for p in parts:
            if p.shape != shape:
                raise ShapeError(f"stack_mid: shapes differ: {[q.shape for q in parts]}")

        def backward(g):
            return [g[:, i, :] for i in range(len(parts))]

        return self._emit(np.stack([p.data for p in parts], axis=1), tuple(parts), backward, "stack_mid")

    # -- indexing ------------------------------------------------------

    def gather_rows(self, table: Tensor, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if table.data.ndim != 2:
            raise ShapeError(f"gather_rows expects a matrix table, got shape {table.shape}")
        n = table.shape[0]
        bad = np.flatnonzero((ids < 0) | (ids >= n))
        if bad.size:
            pos = int(bad[0])
            raise DomainError(f"gather_rows: id {int(ids[pos])} at position {pos} outside [0, {n})")
        shape = table.shape

        def backward(g):
            full = np.zeros(shape)
            np.add.at(full, ids, g)
            return (full,)

        return self._emit(table.data[ids], (table,), backward, "gather_rows")

    def pick(self, a: Tensor, ids) -> Tensor:
        """Select ``a[b, ids[b]]`` from each row of a matrix."""
        ids = np.asarray(ids, dtype=np.int64)
        if a.data.ndim != 2 or ids.shape != (a.shape[0],):
            raise ShapeError(f"pick: shape {a.shape} with ids of shape {ids.shape}")
        rows = np.arange(a.shape[0])
        shape = a.shape

        def backward(g):
            full = np.zeros(shape)
            full[rows, ids] = g
            return (full,)

        return self._emit(a.data[rows, ids], (a,), backward, "pick")

    # -- normalisation ---------------------------------------------------

    def softmax(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Softmax over the last axis; masked-out entries get probability 0."""
        if x.shape[-1] < 1:
            raise ShapeError("softmax over an empty axis")
        y = _softmax(x.data, mask)

        def backward(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._emit(y, (x,), backward, "softmax")

    def log_softmax(self, x: Tensor) -> Tensor:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        y = shifted - lse
        p = np.exp(y)

        def backward(g):
            return (g - p * g.sum(axis=-1, keepdims=True),)

        return self._emit(y, (x,), backward, "log_softmax")

    def weighted_sum(self, weights: Tensor, values: Tensor) -> Tensor:
        """``out[b] = sum_s weights[b, s] * values[b, s, :]``."""
        w, v = weights.data, values.data
        if w.ndim != 2 or v.ndim != 3 or w.shape != v.shape[:2]:
            raise ShapeError(f"weighted_sum: weights {w.shape} vs values {v.shape}")

        def backward(g):
            return np.einsum("bd,bsd->bs", g, v), w[:, :, None] * g[:, None, :]

        return self._emit(np.einsum("bs,bsd->bd", w, v), (weights, values), backward, "weighted_sum")

    # -- reverse pass ----------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
        if not self.nodes:
            raise GraphError("backward on an empty graph")
        if loss.size != 1 or loss.data.ndim != 0:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any parameter")
        loss.grad = np.ones(())
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = np.array(gi, dtype=np.float64) if inp.grad is None else inp.grad + gi
            # intermediates are not needed once their contribution is pushed down
            node.out.grad = None
        loss.grad = np.ones(())
        leaves = {id(t): t for node in self.nodes for t in node.inputs if t.grad is not None}
        for t in leaves.values():
            if not np.isfinite(t.grad).all():
                raise NonFiniteError(f"non-finite gradient for {t.name or 'a leaf tensor'}")


def softmax_row(x: Tensor, graph: Graph | None = None) -> Tensor:
    return (graph or Graph(record=False)).softmax(x)


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def lines(self) -> list[str]:
        out = [f"{name}\t{err:.3e}" for name, err in self.max_rel_error.items()]
        out.append(f"worst\t{self.worst:.3e}\t{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})")
        return out


def finite_diff_check(
    f: Callable[[Graph], Tensor],
    params: dict[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    graph_cls: type[Graph] = Graph,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` builds a scalar loss on the graph it is handed, reading the
    tensors in ``params``.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps coordinates whose
    true gradient is zero from reporting pure rounding noise as error.
    """
    for p in params.values():
        p.grad = None
    g = graph_cls(record=True)
    loss = f(g)
    base = loss.item()
    g.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    for p in params.values():
        p.grad = None

    again = f(graph_cls(record=False)).item()
    if again != base:
        raise GraphError(f"function is not deterministic: {base!r} then {again!r}")

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(graph_cls(record=False)).item()
            flat[i] = orig - step
            down = f(graph_cls(record=False)).item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report[name] = worst
    return GradCheckReport(report, tol)
