"""Tape-based reverse-mode automatic differentiation over matrices.

Operations record themselves eagerly on a :class:`Tape`. Every node stores
its value and a vector-Jacobian product closure; :meth:`Tape.backward`
walks the tape once in reverse.

Fused loss ops (distillation distances, task losses, the spectral tail)
live next to their numeric definitions and register here via
:meth:`Tape.record`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .exceptions import ContractError, MissingInputError, ShapeError

__all__ = [
    "Tape",
    "Var",
    "TapeGraph",
    "GradReport",
    "forward",
    "backward",
    "grad_check",
    "matmul",
    "transpose",
    "add",
    "sub",
    "scale",
    "mul",
    "tanh",
    "relu",
    "row_softmax",
    "sq_frob_dist",
    "log",
    "exp",
    "sum_all",
    "mean",
]

Vjp = Callable[[np.ndarray], tuple]


@dataclass
class _Node:
    id: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Vjp | None
    needs_grad: bool


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        node = self.tape.nodes[self.id]
        return f"Var(id={self.id}, op={node.op!r}, shape={node.value.shape})"


class Tape:
    """Eager computation record; nodes are appended in topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: dict[str, int] = {}
        # Pre-activation values of every relu node, for kink detection.
        self.relu_inputs: list[np.ndarray] = []

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"leaf values must be 2-D, got shape {value.shape}")
        var = self._append("leaf", (), value, None, requires_grad)
        if name is not None:
            self.leaves[name] = var.id
        return var

    def const(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def record(self, op: str, parents: Iterable[Var], value, vjp: Vjp) -> Var:
        parents = tuple(parents)
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands belong to different tapes")
        needs = any(self.nodes[p.id].needs_grad for p in parents)
        return self._append(op, tuple(p.id for p in parents), np.asarray(value, dtype=np.float64), vjp, needs)

    def _append(self, op, parents, value, vjp, needs_grad) -> Var:
        node = _Node(len(self.nodes), op, parents, value, vjp, needs_grad)
        self.nodes.append(node)
        return Var(self, node.id)

    def backward(self, root: Var) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``root`` w.r.t. every node that needs one."""
        if root.value.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.get(node.id)
            if g is None or node.vjp is None or not node.needs_grad:
                continue
            for pid, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not self.nodes[pid].needs_grad:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return grads

    def grad(self, root: Var, wrt: Iterable[Var]) -> list[np.ndarray]:
        grads = self.backward(root)
        return [grads.get(v.id, np.zeros_like(v.value)) for v in wrt]


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# -- primitive ops -----------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    tape = a.tape
    b = _lift(tape, b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return tape.record("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", (a,), a.value.T, lambda g: (g.T,))


def add(a: Var, b) -> Var:
    """Elementwise sum; a 1×n row (e.g. a bias) broadcasts over rows."""
    tape = a.tape
    b = _lift(tape, b)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.shape, b.shape
    return tape.record(
        "add", (a, b), a.value + b.value,
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Var, b) -> Var:
    tape = a.tape
    b = _lift(tape, b)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.shape, b.shape
    return tape.record(
        "sub", (a, b), a.value - b.value,
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("scale", (a,), c * a.value, lambda g: (c * g,))


def mul(a: Var, b: Var) -> Var:
    tape = a.tape
    b = _lift(tape, b)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value
    return tape.record(
        "mul", (a, b), av * bv,
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Var) -> Var:
    x = a.value
    a.tape.relu_inputs.append(x.copy())
    mask = x > 0  # subgradient 0 at the kink
    return a.tape.record("relu", (a,), np.where(mask, x, 0.0), lambda g: (g * mask,))


def row_softmax(a: Var) -> Var:
    x = a.value
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return a.tape.record(
        "row_softmax", (a,), p,
        lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),),
    )


def sq_frob_dist(a: Var, b) -> Var:
    """Squared Frobenius distance ``||a - b||_F^2`` as a 1×1 node."""
    tape = a.tape
    b = _lift(tape, b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_frob_dist: shapes {a.shape} and {b.shape} differ")
    d = a.value - b.value
    return tape.record(
        "sq_frob_dist", (a, b), np.array([[np.sum(d * d)]]),
        lambda g: (2.0 * g[0, 0] * d, -2.0 * g[0, 0] * d),
    )


def log(a: Var) -> Var:
    x = a.value
    return a.tape.record("log", (a,), np.log(x), lambda g: (g / x,))


def exp(a: Var) -> Var:
    y = np.exp(a.value)
    return a.tape.record("exp", (a,), y, lambda g: (g * y,))


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape.record(
        "sum", (a,), np.array([[a.value.sum()]]),
        lambda g: (np.full(shape, g[0, 0]),),
    )


def mean(a: Var) -> Var:
    shape = a.shape
    n = a.value.size
    return a.tape.record(
        "mean", (a,), np.array([[a.value.mean()]]),
        lambda g: (np.full(shape, g[0, 0] / n),),
    )


# -- graph wrapper -----------------------------------------------------------

@dataclass
class GradReport:
    max_rel_err: float
    worst_entry: tuple[str, int, int] | None
    checked: int = 0
    excluded: int = 0


@dataclass
class TapeGraph:
    """A re-playable computation: ``build(tape, **leaf_vars) -> root``.

    ``forward`` records a fresh tape for each call, so the graph can be
    re-evaluated at perturbed inputs by :func:`grad_check`.
    """

    build: Callable[..., Var]
    leaves: tuple[str, ...]
    constants: tuple[str, ...] = ()
    tape: Tape | None = field(default=None, init=False, repr=False)
    root: Var | None = field(default=None, init=False, repr=False)
    bindings: dict[str, np.ndarray] = field(default_factory=dict, init=False, repr=False)


def forward(graph: TapeGraph, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
    missing = [k for k in graph.leaves + graph.constants if k not in inputs]
    if missing:
        raise MissingInputError(f"unbound graph inputs: {missing}")
    tape = Tape()
    vars_ = {k: tape.leaf(inputs[k], name=k) for k in graph.leaves}
    vars_.update({k: tape.const(inputs[k]) for k in graph.constants})
    root = graph.build(tape, **vars_)
    graph.tape, graph.root = tape, root
    graph.bindings = {k: np.array(inputs[k], dtype=np.float64) for k in graph.leaves + graph.constants}
    return root.value


def backward(graph: TapeGraph) -> dict[str, np.ndarray]:
    if graph.tape is None:
        raise ContractError("forward must run before backward")
    grads = graph.tape.backward(graph.root)
    out = {}
    for name in graph.leaves:
        lid = graph.tape.leaves[name]
        out[name] = grads.get(lid, np.zeros_like(graph.tape.nodes[lid].value))
    return out


def _replay(graph: TapeGraph, inputs) -> tuple[float, list[np.ndarray]]:
    tape = Tape()
    vars_ = {k: tape.leaf(inputs[k], name=k) for k in graph.leaves}
    vars_.update({k: tape.const(inputs[k]) for k in graph.constants})
    root = graph.build(tape, **vars_)
    return float(root.value[0, 0]), tape.relu_inputs


def _kink_crossed(base: list[np.ndarray], other: list[np.ndarray]) -> bool:
    return any(np.any((b > 0) != (o > 0)) for b, o in zip(base, other))


def grad_check(graph: TapeGraph, eps: float = 1e-5) -> GradReport:
    """Compare ``backward`` against central finite differences, entry by entry.

    Relative error per entry is ``|a - f| / max(1e-8, |a| + |f|)``. Entries
    whose perturbation flips the sign of any relu input are skipped.
    """
    if eps <= 0:
        raise ContractError(f"eps must be positive, got {eps}")
    if graph.tape is None:
        raise ContractError("forward must run before grad_check")
    analytic = backward(graph)
    base = {k: v.copy() for k, v in graph.bindings.items()}
    relu_base = graph.tape.relu_inputs
    worst, where = 0.0, None
    checked = excluded = 0
    for name in graph.leaves:
        x = base[name]
        for idx in np.ndindex(*x.shape):
            orig = x[idx]
            x[idx] = orig + eps
            fp, rp = _replay(graph, base)
            x[idx] = orig - eps
            fm, rm = _replay(graph, base)
            x[idx] = orig
            if _kink_crossed(relu_base, rp) or _kink_crossed(relu_base, rm):
                excluded += 1
                continue
            fd = (fp - fm) / (2.0 * eps)
            a = analytic[name][idx]
            rel = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
            checked += 1
            if rel > worst:
                worst, where = rel, (name, int(idx[0]), int(idx[1]))
    return GradReport(worst, where, checked, excluded)
