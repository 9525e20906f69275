"""Minimal tape-based reverse-mode differentiation over dense float64 matrices.

Every value on the tape is a 2-D ``numpy.ndarray``.  Binary elementwise ops
accept operands of equal shape, or a 1x1 operand that is broadcast as a
scalar.  Nothing else broadcasts; bias rows are added through a matmul with
a column of ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "NondeterminismError",
    "Node",
    "Tape",
    "forward",
    "backward",
    "grad_check",
    "GradCheckReport",
    "softplus",
    "sigmoid",
    "row_softmax",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}")


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation (e.g. log of <= 0)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced non-finite values")


class NondeterminismError(RuntimeError):
    pass


# -- stable elementwise helpers (also used outside the tape) -----------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def row_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- primitive table ----------------------------------------------------------

BINARY = {"add", "sub", "mul"}
UNARY = {"sigmoid", "softplus", "exp", "log", "square", "sum", "softmax", "rowsum", "scale"}
KINDS = BINARY | UNARY | {"matmul"}


def _is_scalar(shape: tuple[int, ...]) -> bool:
    return shape == (1, 1)


def _elementwise_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b.shape):
        return a.shape
    if _is_scalar(a.shape):
        return b.shape
    raise ShapeError(op, a.shape, b.shape)


def _evaluate(kind: str, args: list[np.ndarray], const: float | None) -> np.ndarray:
    if kind == "matmul":
        a, b = args
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return a @ b
    if kind in BINARY:
        a, b = args
        _elementwise_shape(kind, a, b)
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        return a * b
    (a,) = args
    if kind == "scale":
        return a * const
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "softplus":
        return softplus(a)
    if kind == "exp":
        return np.exp(a)
    if kind == "log":
        if np.any(a <= 0):
            raise DomainError(f"log: {int(np.sum(a <= 0))} non-positive entries")
        return np.log(a)
    if kind == "square":
        return a * a
    if kind == "sum":
        return np.array([[a.sum()]])
    if kind == "rowsum":
        return a.sum(axis=1, keepdims=True)
    if kind == "softmax":
        return row_softmax(a)
    raise ValueError(f"unknown operation {kind!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # only scalar broadcasting exists
    return np.array([[grad.sum()]])


@dataclass
class Node:
    kind: str  # "leaf" or a primitive name
    inputs: tuple[int, ...]
    value: np.ndarray
    const: float | None = None
    name: str | None = None  # set for parameter leaves


@dataclass
class Tape:
    """Ordered record of values; node ids are list indices, so inputs always precede consumers."""

    nodes: list[Node] = field(default_factory=list)

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def constant(self, value) -> int:
        arr = np.array(value, dtype=np.float64, ndmin=2)
        if arr.ndim != 2:
            raise ShapeError("constant", arr.shape)
        return self._push(Node("leaf", (), arr))

    def parameter(self, name: str, value) -> int:
        arr = np.array(value, dtype=np.float64, ndmin=2)
        if arr.ndim != 2:
            raise ShapeError("parameter", arr.shape)
        return self._push(Node("leaf", (), arr, name=name))

    def parameters(self) -> dict[str, int]:
        return {n.name: i for i, n in enumerate(self.nodes) if n.kind == "leaf" and n.name is not None}

    def op(self, kind: str, *inputs: int, const: float | None = None) -> int:
        return forward(self, kind, inputs, const=const)

    # shorthands
    def matmul(self, a, b): return self.op("matmul", a, b)
    def add(self, a, b): return self.op("add", a, b)
    def sub(self, a, b): return self.op("sub", a, b)
    def mul(self, a, b): return self.op("mul", a, b)
    def scale(self, a, c: float): return self.op("scale", a, const=float(c))
    def sigmoid(self, a): return self.op("sigmoid", a)
    def softplus(self, a): return self.op("softplus", a)
    def exp(self, a): return self.op("exp", a)
    def log(self, a): return self.op("log", a)
    def square(self, a): return self.op("square", a)
    def sum(self, a): return self.op("sum", a)
    def rowsum(self, a): return self.op("rowsum", a)
    def softmax(self, a): return self.op("softmax", a)

    def replay(self) -> bool:
        """Recompute every non-leaf node from its inputs; True iff all agree bit-for-bit."""
        for node in self.nodes:
            if node.kind == "leaf":
                continue
            args = [self.nodes[i].value for i in node.inputs]
            if not np.array_equal(_evaluate(node.kind, args, node.const), node.value):
                return False
        return True


def forward(tape: Tape, op_kind: str, inputs, const: float | None = None) -> int:
    """Append one primitive node computed from existing nodes and return its id."""
    if op_kind not in KINDS:
        raise ValueError(f"unknown operation {op_kind!r}")
    inputs = tuple(int(i) for i in inputs)
    arity = 1 if op_kind in UNARY else 2
    if len(inputs) != arity:
        raise ValueError(f"{op_kind} takes {arity} input(s), got {len(inputs)}")
    for i in inputs:
        if not 0 <= i < len(tape.nodes):
            raise IndexError(f"{op_kind}: node {i} is not on the tape")
    if op_kind == "scale" and const is None:
        raise ValueError("scale requires a constant")
    args = [tape.nodes[i].value for i in inputs]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = _evaluate(op_kind, args, const)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op_kind)
    return tape._push(Node(op_kind, inputs, out, const=const))


def _local_grads(tape: Tape, node: Node, g: np.ndarray) -> list[np.ndarray]:
    kind = node.kind
    args = [tape.nodes[i].value for i in node.inputs]
    out = node.value
    if kind == "matmul":
        a, b = args
        return [g @ b.T, a.T @ g]
    if kind == "add":
        a, b = args
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]
    if kind == "sub":
        a, b = args
        return [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]
    if kind == "mul":
        a, b = args
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]
    (a,) = args
    if kind == "scale":
        return [g * node.const]
    if kind == "sigmoid":
        return [g * out * (1.0 - out)]
    if kind == "softplus":
        return [g * sigmoid(a)]
    if kind == "exp":
        return [g * out]
    if kind == "log":
        return [g / a]
    if kind == "square":
        return [2.0 * g * a]
    if kind == "sum":
        return [np.full_like(a, g[0, 0])]
    if kind == "rowsum":
        return [np.broadcast_to(g, a.shape).copy()]
    if kind == "softmax":
        inner = (g * out).sum(axis=1, keepdims=True)
        return [out * (g - inner)]
    raise ValueError(f"no derivative rule for {kind!r}")


def backward(tape: Tape, loss_node: int) -> dict[str, np.ndarray]:
    """Reverse sweep from a 1x1 node; returns gradients keyed by parameter name."""
    loss = tape.nodes[loss_node]
    if loss.value.shape != (1, 1):
        raise ShapeError("backward (loss must be 1x1)", loss.value.shape)
    adj: dict[int, np.ndarray] = {loss_node: np.ones((1, 1))}
    for idx in range(loss_node, -1, -1):
        g = adj.pop(idx, None)
        node = tape.nodes[idx]
        if node.kind == "leaf":
            if g is not None and node.name is not None:
                adj[idx] = g  # park it; collected below
            continue
        if g is None:
            continue
        for src, dg in zip(node.inputs, _local_grads(tape, node, g)):
            # fan-out: contributions accumulate
            adj[src] = adj[src] + dg if src in adj else dg
    grads = {}
    for name, idx in tape.parameters().items():
        grads[name] = adj.get(idx, np.zeros_like(tape.nodes[idx].value))
    return grads


@dataclass
class GradCheckReport:
    deviation: dict[str, float]  # worst relative deviation per parameter block
    rtol: float

    @property
    def passed(self) -> bool:
        return all(d <= self.rtol for d in self.deviation.values())

    def __str__(self) -> str:
        lines = [f"{k}: {v:.3e}" for k, v in self.deviation.items()]
        return "\n".join(lines + [f"{'PASS' if self.passed else 'FAIL'} (rtol={self.rtol:g})"])


BuildFn = Callable[[Tape, dict[str, int]], int]


def _evaluate_loss(build_fn: BuildFn, params: dict[str, np.ndarray]) -> tuple[Tape, int]:
    tape = Tape()
    ids = {k: tape.parameter(k, v) for k, v in params.items()}
    return tape, build_fn(tape, ids)


def grad_check(
    build_fn: BuildFn,
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    rtol: float = 1e-4,
    analytic: dict[str, np.ndarray] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    Deviation per entry is ``|a - fd| / max(|a|, |fd|, floor * max(1, max|fd|))``;
    the floor keeps near-zero entries from dividing rounding noise by ~0.
    Pass ``analytic`` to check a supplied gradient instead of ``backward``'s.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64, ndmin=2) for k, v in params.items()}
    tape, loss = _evaluate_loss(build_fn, params)
    tape2, loss2 = _evaluate_loss(build_fn, params)
    if not np.array_equal(tape.value(loss), tape2.value(loss2)):
        raise NondeterminismError("build_fn gave different losses for identical parameters")
    if analytic is None:
        analytic = backward(tape, loss)

    def f(p):
        t, node = _evaluate_loss(build_fn, p)
        return t.value(node)[0, 0]

    deviation = {}
    for name, value in params.items():
        fd = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            shifted = dict(params)
            plus = value.copy()
            plus[idx] += step
            minus = value.copy()
            minus[idx] -= step
            shifted[name] = plus
            fp = f(shifted)
            shifted[name] = minus
            fm = f(shifted)
            fd[idx] = (fp - fm) / (2.0 * step)
        a = analytic[name]
        scale = floor * max(1.0, float(np.max(np.abs(fd)))) if fd.size else floor
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), scale)
        deviation[name] = float(np.max(np.abs(a - fd) / denom)) if value.size else 0.0
    return GradCheckReport(deviation, rtol)
