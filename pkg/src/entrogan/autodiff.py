"""Minimal define-then-run reverse-mode autodiff on a flat tape.

A ``Tape`` records nodes in creation order.  Inputs and constants are leaf
nodes; every other node names a primitive, its parents, and enough static
metadata (shapes, axes, coefficients) that the graph can be checked before
any values exist.  ``forward`` binds concrete arrays to the inputs in
declaration order and evaluates the tape top to bottom; ``backward`` walks
it bottom to top, accumulating adjoints into pre-zeroed slots.

The primitive set is fixed: affine, exp, log, square, neg, leaky_rectifier,
logsumexp, sum/mean reductions, scalar-coefficient lincomb, and elementwise
mul.  Everything differentiable in this package is composed from these.

Tapes are not thread-safe; share nothing or lock externally.  Node values
and gradients live on the tape between calls, so one tape can be reused for
many forward/backward rounds with fresh input bindings (same shapes).
"""

from __future__ import annotations

import numpy as np


class NumericOverflow(ArithmeticError):
    """A forward pass produced a non-finite value.  Names the node."""


class TapeStateError(RuntimeError):
    """backward called before a successful forward."""


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


def _reduced_shape(shape: tuple[int, ...], axis, keepdims: bool) -> tuple[int, ...]:
    if axis is None:
        return tuple(1 for _ in shape) if keepdims else ()
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if keepdims:
        return tuple(1 if i in axes else n for i, n in enumerate(shape))
    return tuple(n for i, n in enumerate(shape) if i not in axes)


class Node:
    """One tape entry.  ``value`` and ``grad`` are filled by forward/backward."""

    __slots__ = ("tape", "index", "op", "parents", "meta", "shape", "name",
                 "value", "grad")

    def __init__(self, tape: "Tape", op: str, parents: tuple["Node", ...],
                 meta: dict, shape: tuple[int, ...], name: str):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.meta = meta
        self.shape = shape
        self.name = name
        self.value: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self.index = len(tape.nodes)
        tape.nodes.append(self)
        tape.version += 1

    def __repr__(self) -> str:
        return f"Node({self.index}:{self.op}:{self.name}, shape={self.shape})"

    # sugar used throughout the graph builders
    def __add__(self, other: "Node") -> "Node":
        return lincomb(1.0, self, 1.0, other)

    def __sub__(self, other: "Node") -> "Node":
        return lincomb(1.0, self, -1.0, other)

    def __neg__(self) -> "Node":
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return lincomb(float(other), self)

    __rmul__ = __mul__


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: list[Node] = []
        self.version = 0
        self._forward_version = -1

    def input(self, shape: tuple[int, ...] | list[int], name: str = "") -> Node:
        node = Node(self, "input", (), {}, tuple(shape),
                    name or f"input{len(self.inputs)}")
        self.inputs.append(node)
        return node

    def constant(self, value, name: str = "const") -> Node:
        arr = np.asarray(value, dtype=np.float64)
        node = Node(self, "const", (), {"value": arr}, arr.shape, name)
        node.value = arr
        return node

    @property
    def output(self) -> Node:
        if not self.nodes:
            raise TapeStateError("empty tape has no output")
        return self.nodes[-1]


def _same_tape(nodes) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("nodes belong to different tapes")
    return tape


def _elementwise(op: str, x: Node, meta: dict | None = None, name: str = "") -> Node:
    return Node(x.tape, op, (x,), meta or {}, x.shape, name or op)


def exp(x: Node) -> Node:
    return _elementwise("exp", x)


def log(x: Node) -> Node:
    return _elementwise("log", x)


def square(x: Node) -> Node:
    return _elementwise("square", x)


def neg(x: Node) -> Node:
    return _elementwise("neg", x)


def leaky_rectifier(x: Node, slope: float) -> Node:
    """max(x, slope*x).  Subgradient convention: slope at exactly zero."""
    return _elementwise("leaky", x, {"slope": float(slope)})


def logsumexp(x: Node, axis=None, keepdims: bool = False) -> Node:
    shape = _reduced_shape(x.shape, axis, keepdims)
    return Node(x.tape, "lse", (x,), {"axis": axis, "keepdims": keepdims},
                shape, "lse")


def reduce_sum(x: Node, axis=None, keepdims: bool = False) -> Node:
    shape = _reduced_shape(x.shape, axis, keepdims)
    return Node(x.tape, "sum", (x,), {"axis": axis, "keepdims": keepdims},
                shape, "sum")


def reduce_mean(x: Node, axis=None, keepdims: bool = False) -> Node:
    shape = _reduced_shape(x.shape, axis, keepdims)
    return Node(x.tape, "mean", (x,), {"axis": axis, "keepdims": keepdims},
                shape, "mean")


def affine(x: Node, w: Node, b: Node | None = None,
           transpose_w: bool = False, name: str = "affine") -> Node:
    """x @ w (+ b), or x @ w.T when ``transpose_w``.  b broadcasts over rows."""
    if len(x.shape) != 2 or len(w.shape) != 2:
        raise ValueError(f"affine needs 2-d operands, got {x.shape} and {w.shape}")
    wr, wc = w.shape
    inner, out_cols = (wc, wr) if transpose_w else (wr, wc)
    if x.shape[1] != inner:
        raise ValueError(
            f"affine inner dimension mismatch: {x.shape} vs {w.shape}"
            f" (transpose_w={transpose_w})")
    if b is not None and b.shape not in ((out_cols,), (1, out_cols)):
        raise ValueError(f"affine bias shape {b.shape} incompatible with"
                         f" {out_cols} output columns")
    parents = (x, w) if b is None else (x, w, b)
    tape = _same_tape(parents)
    return Node(tape, "affine", parents, {"transpose_w": transpose_w},
                (x.shape[0], out_cols), name)


def lincomb(a: float, x: Node, b: float | None = None, y: Node | None = None,
            name: str = "lincomb") -> Node:
    """a*x + b*y with scalar coefficients; operands broadcast."""
    if (b is None) != (y is None):
        raise ValueError("lincomb needs both b and y or neither")
    if y is None:
        return Node(x.tape, "lincomb", (x,), {"a": float(a)}, x.shape, name)
    shape = np.broadcast_shapes(x.shape, y.shape)
    tape = _same_tape((x, y))
    return Node(tape, "lincomb", (x, y), {"a": float(a), "b": float(b)},
                shape, name)


def mul(x: Node, y: Node) -> Node:
    """Elementwise product; operands broadcast."""
    shape = np.broadcast_shapes(x.shape, y.shape)
    tape = _same_tape((x, y))
    return Node(tape, "mul", (x, y), {}, shape, "mul")


def _eval(node: Node) -> np.ndarray:
    op = node.op
    vals = [p.value for p in node.parents]
    if op == "exp":
        return np.exp(vals[0])
    if op == "log":
        return np.log(vals[0])
    if op == "square":
        return np.square(vals[0])
    if op == "neg":
        return -vals[0]
    if op == "leaky":
        s = node.meta["slope"]
        return np.where(vals[0] > 0.0, vals[0], s * vals[0])
    if op == "lse":
        x = vals[0]
        axis, keep = node.meta["axis"], node.meta["keepdims"]
        m = np.max(x, axis=axis, keepdims=True)
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
        if not keep:
            out = out.reshape(node.shape)
        return out
    if op == "sum":
        return np.sum(vals[0], axis=node.meta["axis"],
                      keepdims=node.meta["keepdims"])
    if op == "mean":
        return np.mean(vals[0], axis=node.meta["axis"],
                       keepdims=node.meta["keepdims"])
    if op == "affine":
        x, w = vals[0], vals[1]
        out = x @ w.T if node.meta["transpose_w"] else x @ w
        if len(vals) == 3:
            out = out + vals[2]
        return out
    if op == "lincomb":
        if len(vals) == 1:
            return node.meta["a"] * vals[0]
        return node.meta["a"] * vals[0] + node.meta["b"] * vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    raise AssertionError(f"unknown op {op!r}")


def _backprop(node: Node, grad: np.ndarray) -> None:
    op = node.op
    parents = node.parents
    vals = [p.value for p in parents]
    if op == "exp":
        parents[0].grad += grad * node.value
    elif op == "log":
        parents[0].grad += grad / vals[0]
    elif op == "square":
        parents[0].grad += grad * 2.0 * vals[0]
    elif op == "neg":
        parents[0].grad -= grad
    elif op == "leaky":
        s = node.meta["slope"]
        parents[0].grad += grad * np.where(vals[0] > 0.0, 1.0, s)
    elif op == "lse":
        axis = node.meta["axis"]
        out = node.value if node.meta["keepdims"] else \
            node.value.reshape(_reduced_shape(vals[0].shape, axis, True))
        g = grad if node.meta["keepdims"] else \
            grad.reshape(_reduced_shape(vals[0].shape, axis, True))
        parents[0].grad += g * np.exp(vals[0] - out)
    elif op in ("sum", "mean"):
        axis, keep = node.meta["axis"], node.meta["keepdims"]
        g = grad if keep else \
            np.reshape(grad, _reduced_shape(vals[0].shape, axis, True))
        if op == "mean":
            g = g / (vals[0].size / max(node.value.size, 1))
        parents[0].grad += np.broadcast_to(g, vals[0].shape)
    elif op == "affine":
        x, w = vals[0], vals[1]
        if node.meta["transpose_w"]:
            parents[0].grad += grad @ w
            parents[1].grad += grad.T @ x
        else:
            parents[0].grad += grad @ w.T
            parents[1].grad += x.T @ grad
        if len(parents) == 3:
            parents[2].grad += _unbroadcast(grad, parents[2].shape)
    elif op == "lincomb":
        parents[0].grad += _unbroadcast(node.meta["a"] * grad, parents[0].shape)
        if len(parents) == 2:
            parents[1].grad += _unbroadcast(node.meta["b"] * grad,
                                            parents[1].shape)
    elif op == "mul":
        parents[0].grad += _unbroadcast(grad * vals[1], parents[0].shape)
        parents[1].grad += _unbroadcast(grad * vals[0], parents[1].shape)
    else:
        raise AssertionError(f"unknown op {op!r}")


def forward(tape: Tape, inputs: list[np.ndarray]) -> np.ndarray:
    """Bind ``inputs`` to the tape's input nodes (declaration order) and
    evaluate every node.  Returns the value of the last-recorded node.

    Raises ValueError on arity or shape mismatch and NumericOverflow if any
    intermediate is non-finite.
    """
    if len(inputs) != len(tape.inputs):
        raise ValueError(f"tape has {len(tape.inputs)} inputs,"
                         f" got {len(inputs)} arrays")
    for slot, arr in zip(tape.inputs, inputs):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != slot.shape:
            raise ValueError(f"input {slot.name!r} expects shape {slot.shape},"
                             f" got {arr.shape}")
        slot.value = arr
    # the tape runs its own finite check, so numpy's warnings are redundant
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for node in tape.nodes:
            if node.op not in ("input", "const"):
                node.value = _eval(node)
            if node.value is not None and not np.all(np.isfinite(node.value)):
                tape._forward_version = -1
                raise NumericOverflow(
                    f"non-finite value at node {node.index}"
                    f" ({node.op}:{node.name})")
    tape._forward_version = tape.version
    return tape.output.value


def backward(tape: Tape) -> list[np.ndarray]:
    """Reverse sweep from the tape's output (which must be scalar-sized).

    Returns gradients for the tape's inputs in declaration order.
    """
    if tape._forward_version != tape.version:
        raise TapeStateError("backward requires a forward pass on the"
                             " current tape structure")
    out = tape.output
    if out.value.size != 1:
        raise ValueError(f"output must be scalar, has shape {out.value.shape}")
    for node in tape.nodes:
        node.grad = np.zeros(np.shape(node.value))
    out.grad = np.ones(np.shape(out.value))
    for node in reversed(tape.nodes):
        if node.op in ("input", "const"):
            continue
        if not np.any(node.grad):
            continue
        _backprop(node, node.grad)
    return [inp.grad for inp in tape.inputs]


def finite_difference_gradient(tape: Tape, inputs: list[np.ndarray],
                               step: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradient of the tape output for every input entry.

    Exact-arithmetic oracle for backward; cost is two forwards per scalar, so
    keep the graphs small.
    """
    base = [np.array(a, dtype=np.float64) for a in inputs]
    grads = []
    for which, arr in enumerate(base):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = float(forward(tape, base))
            flat[i] = saved - step
            lo = float(forward(tape, base))
            flat[i] = saved
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    forward(tape, base)
    return grads
