"""Define-by-run reverse-mode automatic differentiation.

A :class:`Node` wraps a numpy array.  Every differentiable operation creates
a new node holding references to its parents and a closure mapping the
upstream gradient to one gradient per parent.  ``backward`` walks the graph
in reverse topological order and accumulates gradients additively into leaf
nodes that have ``requires_grad=True``.

Leaf gradients are *not* cleared between calls; the training loop zeroes
them explicitly.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, OracleInvalidError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True
_tape_stack: list["Tape"] = []


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "name")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: Optional[str] = None,
        *,
        parents: Sequence["Node"] = (),
        backward_fn: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.value = np.asarray(value)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    # arithmetic sugar; all route through the functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_node(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Records nodes in execution order while active.

    Used as ``with Tape() as tape: ...``; ``tape.backward(loss)`` then replays
    the recorded order in reverse.  Because nodes are appended as they are
    created, every node appears after its parents.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Node, grad: Optional[np.ndarray] = None) -> None:
        backward(loss, grad=grad, tape=self)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def as_node(x, dtype=None) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Node(arr)


def make_node(value: np.ndarray, parents: Sequence[Node], backward_fn: BackwardFn, op: str) -> Node:
    """Create the output node of an operation, recording it if gradients flow."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Node(value, op=op)
    node = Node(value, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    if _tape_stack:
        _tape_stack[-1].record(node)
    return node


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, grad: Optional[np.ndarray] = None, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``loss`` must hold exactly one element unless an explicit upstream
    ``grad`` of matching shape is supplied.
    """
    if grad is None:
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.value)
    elif grad.shape != loss.shape:
        raise ShapeError(f"upstream grad shape {grad.shape} != loss shape {loss.shape}")
    if not loss.requires_grad:
        return

    if tape is not None:
        order = list(tape.nodes)
        if loss.is_leaf:
            order.append(loss)
    else:
        order = _toposort(loss)

    grads: dict[int, np.ndarray] = {id(loss): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{node.op}: gradient shape {pg.shape} != parent shape {parent.shape}"
                )
            key = id(parent)
            if parent.is_leaf and tape is not None:
                # leaves are not on the tape; flush them immediately
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
                continue
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementary differentiable ops


def _unbroadcast_scalar(g: np.ndarray, target: Node) -> np.ndarray:
    if target.value.shape == g.shape:
        return g
    return np.asarray(g.sum(), dtype=target.dtype).reshape(target.shape)


def _binary(a, b, name: str):
    a = as_node(a)
    b = as_node(b, a.dtype)
    if a.shape != b.shape and b.value.size != 1 and a.value.size != 1:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def add(a, b) -> Node:
    a, b = _binary(a, b, "add")
    out = a.value + b.value

    def bw(g):
        return _unbroadcast_scalar(g, a), _unbroadcast_scalar(g, b)

    return make_node(out, (a, b), bw, "add")


def sub(a, b) -> Node:
    a, b = _binary(a, b, "sub")
    out = a.value - b.value

    def bw(g):
        return _unbroadcast_scalar(g, a), _unbroadcast_scalar(-g, b)

    return make_node(out, (a, b), bw, "sub")


def mul(a, b) -> Node:
    a, b = _binary(a, b, "mul")
    out = a.value * b.value

    def bw(g):
        return _unbroadcast_scalar(g * b.value, a), _unbroadcast_scalar(g * a.value, b)

    return make_node(out, (a, b), bw, "mul")


def div(a, b) -> Node:
    a, b = _binary(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.value / b.value

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.value
            gb = -g * a.value / (b.value * b.value)
        return _unbroadcast_scalar(ga, a), _unbroadcast_scalar(gb, b)

    return make_node(out, (a, b), bw, "div")


def sum_all(x: Node) -> Node:
    out = np.asarray(x.value.sum(), dtype=x.dtype)

    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return make_node(out, (x,), bw, "sum")


def mean_all(x: Node) -> Node:
    n = x.value.size
    out = np.asarray(x.value.sum() / n, dtype=x.dtype)

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return make_node(out, (x,), bw, "mean")


def log(x: Node) -> Node:
    with np.errstate(divide="ignore"):
        out = np.log(x.value)

    def bw(g):
        return (g / x.value,)

    return make_node(out, (x,), bw, "log")


def clip(x: Node, lo: float, hi: float) -> Node:
    out = np.clip(x.value, lo, hi)

    def bw(g):
        inside = (x.value >= lo) & (x.value <= hi)
        return (np.where(inside, g, 0).astype(x.dtype),)

    return make_node(out, (x,), bw, "clip")


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        lines = [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        status = "PASS" if self.passed else "FAIL"
        return f"{status} (max {self.max_error:.3e} < {self.tolerance:g})\n" + "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def finite_difference_check(
    f: Callable[[Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    h: float = 1e-4,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f`` with central differences.

    ``f`` receives a mapping of name -> leaf Node and must return a scalar
    Node.  Arrays in ``params`` are copied; callers should pass float64.
    Raises :class:`OracleInvalidError` if two evaluations at the same point
    disagree.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    arrays = {k: np.array(v, dtype=np.float64 if v.dtype.kind != "f" else v.dtype) for k, v in params.items()}

    def evaluate(arrs) -> float:
        with no_grad():
            out = f({k: Node(v) for k, v in arrs.items()})
        if out.value.size != 1:
            raise ContractError(f"f must be scalar-valued, got shape {out.shape}")
        return float(out.value.reshape(()))

    first, second = evaluate(arrays), evaluate(arrays)
    if first != second:
        raise OracleInvalidError(f"f is non-deterministic: {first!r} != {second!r}")

    leaves = {k: Node(v.copy(), requires_grad=True, name=k) for k, v in arrays.items()}
    loss = f(leaves)
    backward(loss)

    report = GradCheckReport(tolerance=tolerance)
    for name, arr in arrays.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate(arrays)
            flat[i] = orig - h
            fm = evaluate(arrays)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        report.errors[name] = relative_error(analytic, numeric)
    return report
