"""Static-graph reverse-mode differentiation over a small primitive set.

A :class:`Graph` is built once (leaves, then primitive applications in
topological order) and can then be evaluated on any number of input
bindings. ``evaluate`` returns a :class:`Trace` holding every node value;
``backward`` walks the trace in reverse and returns gradients for every
differentiable leaf.

Values are float64 arrays of rank >= 2 for matrix primitives; leading axes
act as batch axes (``matmul`` broadcasts them, row-wise primitives act on the
last axis). Reductions may produce 0-d scalars.

Example::

    g = Graph()
    x = g.input("x")
    w = g.input("w")
    y = g.sum(g.mul(g.matmul(x, g.transpose(w)), g.matmul(x, g.transpose(w))))
    g.output(y, "loss")
    trace = evaluate(g, {"x": xv, "w": wv})
    grads = backward(g, trace)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

NORM_EPS = 1e-6


class GraphError(ValueError):
    """Structural problem with a graph or its bindings."""


class NonDifferentiableError(GraphError):
    """Gradient requested through an index-valued node."""


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    args: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict, compare=False, hash=False)
    name: str | None = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _topk(x: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -x: ties resolve to the lowest index
    return np.argsort(-x, axis=-1, kind="stable")[..., :k]


# --- forward rules: f(values, attrs) -> value ---------------------------------

def _fwd_rmsnorm(v, at):
    (x,) = v
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + at["eps"])
    return x / r


def _fwd_layernorm(v, at):
    (x,) = v
    c = x - np.mean(x, axis=-1, keepdims=True)
    s = np.sqrt(np.mean(c * c, axis=-1, keepdims=True) + at["eps"])
    return c / s


def _fwd_cross_entropy(v, at):
    logits, targets = v
    m = np.max(logits, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(logits - m), axis=-1)) + m[..., 0]
    picked = np.take_along_axis(logits, targets[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.asarray(np.mean(lse - picked))


def _fwd_scatter(v, at):
    vals, idx = v
    out = np.zeros(vals.shape[:-1] + (at["n"],))
    np.put_along_axis(out, idx, vals, axis=-1)
    return out


def _fwd_count(v, at):
    (idx,) = v
    return np.bincount(idx.ravel(), minlength=at["n"]).astype(np.float64)


_FORWARD: dict[str, Callable] = {
    "matmul": lambda v, at: np.matmul(v[0], v[1]),
    "add": lambda v, at: v[0] + v[1],
    "sub": lambda v, at: v[0] - v[1],
    "mul": lambda v, at: v[0] * v[1],
    "div": lambda v, at: v[0] / v[1],
    "scale": lambda v, at: v[0] * at["c"],
    "transpose": lambda v, at: _swap(v[0]),
    "reshape": lambda v, at: v[0].reshape(at["shape"]),
    "permute": lambda v, at: np.transpose(v[0], at["axes"]),
    "slice": lambda v, at: v[0][..., at["start"]:at["stop"]],
    "softmax": lambda v, at: _softmax(v[0]),
    "rmsnorm": _fwd_rmsnorm,
    "layernorm": _fwd_layernorm,
    "silu": lambda v, at: v[0] * _sigmoid(v[0]),
    "sigmoid": lambda v, at: _sigmoid(v[0]),
    "exp": lambda v, at: np.exp(v[0]),
    "log": lambda v, at: np.log(v[0]),
    "sqrt": lambda v, at: np.sqrt(v[0]),
    "sum": lambda v, at: np.sum(v[0], axis=at.get("axis"), keepdims=at.get("keepdims", False)),
    "gather_rows": lambda v, at: v[0][v[1].astype(np.int64)],
    "topk": lambda v, at: _topk(v[0], at["k"]),
    "take": lambda v, at: np.take_along_axis(v[0], v[1], axis=-1),
    "scatter": _fwd_scatter,
    "count": _fwd_count,
    "detach": lambda v, at: np.asarray(v[0], dtype=np.float64).copy(),
    "cross_entropy": _fwd_cross_entropy,
}


# --- reverse rules: vjp(g, values, out, attrs) -> tuple of grads (None = no grad)

def _vjp_matmul(g, v, out, at):
    a, b = v
    return _unbroadcast(np.matmul(g, _swap(b)), a.shape), _unbroadcast(np.matmul(_swap(a), g), b.shape)


def _vjp_rmsnorm(g, v, out, at):
    (x,) = v
    n = x.shape[-1]
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + at["eps"])
    return (g / r - x * np.sum(g * x, axis=-1, keepdims=True) / (n * r**3),)


def _vjp_layernorm(g, v, out, at):
    (x,) = v
    c = x - np.mean(x, axis=-1, keepdims=True)
    s = np.sqrt(np.mean(c * c, axis=-1, keepdims=True) + at["eps"])
    y = out
    gm = np.mean(g, axis=-1, keepdims=True)
    gy = np.mean(g * y, axis=-1, keepdims=True)
    return ((g - gm - y * gy) / s,)


def _vjp_softmax(g, v, out, at):
    return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)


def _vjp_silu(g, v, out, at):
    (x,) = v
    s = _sigmoid(x)
    return (g * (s + x * s * (1.0 - s)),)


def _vjp_sum(g, v, out, at):
    (x,) = v
    axis = at.get("axis")
    if axis is not None and not at.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


def _vjp_gather(g, v, out, at):
    table, idx = v
    gt = np.zeros_like(table)
    np.add.at(gt, idx.astype(np.int64), g)
    return gt, None


def _vjp_take(g, v, out, at):
    a, idx = v
    ga = np.zeros_like(a)
    np.put_along_axis(ga, idx, g, axis=-1)
    return ga, None


def _vjp_cross_entropy(g, v, out, at):
    logits, targets = v
    p = _softmax(logits)
    t = targets.astype(np.int64)
    np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
    n = int(np.prod(logits.shape[:-1]))
    return p * (g / n), None


def _vjp_permute(g, v, out, at):
    return (np.transpose(g, np.argsort(at["axes"])),)


def _vjp_slice(g, v, out, at):
    (x,) = v
    gx = np.zeros_like(x)
    gx[..., at["start"]:at["stop"]] = g
    return (gx,)


_BACKWARD: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": lambda g, v, o, at: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
    "sub": lambda g, v, o, at: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
    "mul": lambda g, v, o, at: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
    "div": lambda g, v, o, at: (_unbroadcast(g / v[1], v[0].shape),
                                _unbroadcast(-g * v[0] / v[1] ** 2, v[1].shape)),
    "scale": lambda g, v, o, at: (g * at["c"],),
    "transpose": lambda g, v, o, at: (_swap(g),),
    "reshape": lambda g, v, o, at: (g.reshape(v[0].shape),),
    "permute": _vjp_permute,
    "slice": _vjp_slice,
    "softmax": _vjp_softmax,
    "rmsnorm": _vjp_rmsnorm,
    "layernorm": _vjp_layernorm,
    "silu": _vjp_silu,
    "sigmoid": lambda g, v, o, at: (g * o * (1.0 - o),),
    "exp": lambda g, v, o, at: (g * o,),
    "log": lambda g, v, o, at: (g / v[0],),
    "sqrt": lambda g, v, o, at: (g / (2.0 * o),),
    "sum": _vjp_sum,
    "gather_rows": _vjp_gather,
    "take": _vjp_take,
    "scatter": lambda g, v, o, at: (np.take_along_axis(g, v[1], axis=-1), None),
    "detach": lambda g, v, o, at: (None,),
    "cross_entropy": _vjp_cross_entropy,
}

# primitives whose output carries no gradient at all
_INDEX_OPS = {"topk", "count"}


class Trace:
    """Values of one evaluation; read named outputs with ``trace[name]``."""

    def __init__(self, graph: "Graph", values: list):
        self.graph = graph
        self.values = values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.graph.outputs[name]]

    def value(self, node: Node | int) -> np.ndarray:
        return self.values[node if isinstance(node, int) else node.id]

    def named(self) -> dict[str, np.ndarray]:
        return {k: self.values[i] for k, i in self.graph.outputs.items()}


class Graph:
    """Append-only list of primitive applications.

    Leaves are named inputs (bound at evaluation time) or constants. Nodes can
    only reference earlier nodes, so the list is already a topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.differentiable: dict[str, bool] = {}
        self.outputs: dict[str, int] = {}
        self._consts: dict[int, np.ndarray] = {}

    # leaves
    def input(self, name: str, differentiable: bool = True) -> Node:
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        node = self._add("input", (), name=name)
        self.inputs[name] = node.id
        self.differentiable[name] = differentiable
        return node

    def const(self, value) -> Node:
        node = self._add("const", ())
        self._consts[node.id] = np.asarray(value)
        return node

    def output(self, node: Node, name: str) -> Node:
        self.outputs[name] = node.id
        return node

    def _add(self, op: str, args: tuple, name: str | None = None, **attrs) -> Node:
        ids = []
        for a in args:
            if not isinstance(a, Node) or a.id >= len(self.nodes) or self.nodes[a.id] is not a:
                raise GraphError(f"{op}: operand is not a node of this graph")
            ids.append(a.id)
        node = Node(len(self.nodes), op, tuple(ids), attrs, name)
        self.nodes.append(node)
        return node

    # primitives
    def matmul(self, a, b): return self._add("matmul", (a, b))
    def add(self, a, b): return self._add("add", (a, b))
    def sub(self, a, b): return self._add("sub", (a, b))
    def mul(self, a, b): return self._add("mul", (a, b))
    def div(self, a, b): return self._add("div", (a, b))
    def scale(self, a, c: float): return self._add("scale", (a,), c=float(c))
    def transpose(self, a): return self._add("transpose", (a,))
    def reshape(self, a, shape): return self._add("reshape", (a,), shape=tuple(shape))
    def permute(self, a, axes): return self._add("permute", (a,), axes=tuple(axes))
    def slice(self, a, start: int, stop: int): return self._add("slice", (a,), start=start, stop=stop)
    def softmax(self, a): return self._add("softmax", (a,))
    def rmsnorm(self, a, eps: float = NORM_EPS): return self._add("rmsnorm", (a,), eps=eps)
    def layernorm(self, a, eps: float = NORM_EPS): return self._add("layernorm", (a,), eps=eps)
    def silu(self, a): return self._add("silu", (a,))
    def sigmoid(self, a): return self._add("sigmoid", (a,))
    def exp(self, a): return self._add("exp", (a,))
    def log(self, a): return self._add("log", (a,))
    def sqrt(self, a): return self._add("sqrt", (a,))

    def sum(self, a, axis: int | None = None, keepdims: bool = False):
        return self._add("sum", (a,), axis=axis, keepdims=keepdims)

    def gather_rows(self, table, idx): return self._add("gather_rows", (table, idx))
    def topk(self, a, k: int): return self._add("topk", (a,), k=int(k))
    def take(self, a, idx): return self._add("take", (a, idx))
    def scatter(self, vals, idx, n: int): return self._add("scatter", (vals, idx), n=int(n))
    def count(self, idx, n: int): return self._add("count", (idx,), n=int(n))
    def detach(self, a): return self._add("detach", (a,))  # value passes, gradient stops
    def cross_entropy(self, logits, targets): return self._add("cross_entropy", (logits, targets))

    def __len__(self) -> int:
        return len(self.nodes)


def evaluate(graph: Graph, inputs: dict[str, np.ndarray]) -> Trace:
    """Run the graph forward. Pure: identical inputs give bit-identical values."""
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise GraphError(f"unbound inputs: {sorted(missing)}")
    values: list = [None] * len(graph.nodes)
    for node in graph.nodes:
        if node.op == "input":
            v = np.asarray(inputs[node.name])
            values[node.id] = v if graph.differentiable[node.name] is False else v.astype(np.float64, copy=False)
            continue
        if node.op == "const":
            values[node.id] = graph._consts[node.id]
            continue
        args = [values[i] for i in node.args]
        try:
            values[node.id] = _FORWARD[node.op](args, node.attrs)
        except (ValueError, IndexError) as exc:
            shapes = [getattr(a, "shape", None) for a in args]
            raise GraphError(f"node {node.id} ({node.op}) with operand shapes {shapes}: {exc}") from exc
    return Trace(graph, values)


def backward(graph: Graph, trace: Trace, seed=None, output: str | None = None) -> dict[str, np.ndarray]:
    """Reverse accumulation from one output.

    ``output`` names the output node (default: the only one). ``seed`` defaults
    to ones, i.e. the gradient of a scalar output. Returns one gradient per
    differentiable input that the output depends on.
    """
    if output is None:
        if len(graph.outputs) != 1:
            raise GraphError("graph has several outputs; pass output=")
        output = next(iter(graph.outputs))
    out_id = graph.outputs[output]
    out_val = trace.values[out_id]
    if graph.nodes[out_id].op in _INDEX_OPS:
        raise NonDifferentiableError(f"output {output!r} is index-valued")
    if seed is None:
        seed = np.ones_like(out_val, dtype=np.float64)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != np.shape(out_val):
        raise GraphError(f"seed shape {seed.shape} does not match output shape {np.shape(out_val)}")

    grads: dict[int, np.ndarray] = {out_id: seed}
    for node in reversed(graph.nodes[: out_id + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.op == "input":
            if graph.differentiable[node.name]:
                grads[node.id] = g  # kept for collection below
            continue
        if node.op == "const":
            continue
        if node.op in _INDEX_OPS:
            raise NonDifferentiableError(f"gradient requested through index node {node.id} ({node.op})")
        args = [trace.values[i] for i in node.args]
        for i, ga in zip(node.args, _BACKWARD[node.op](g, args, trace.values[node.id], node.attrs)):
            if ga is None:
                continue
            if graph.nodes[i].op in _INDEX_OPS:
                raise NonDifferentiableError(f"gradient requested through index node {i} ({graph.nodes[i].op})")
            grads[i] = grads[i] + ga if i in grads else ga

    return {
        name: grads[nid]
        for name, nid in graph.inputs.items()
        if graph.differentiable[name] and nid in grads
    }
