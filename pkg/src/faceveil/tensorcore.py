"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine records a dynamic tape of primitive operations.  Values are plain
numpy arrays in row-major order (a scalar is a 0-d array).  Parameters live
in a ParamStore, grouped under string layer identifiers; a backward pass
reports one flattened gradient vector per layer, which is the granularity at
which the training loop does its gradient bookkeeping.

Nodes and tapes are immutable after construction.  Optimizer updates replace
ParamStore arrays instead of mutating them in place, so read-only evaluation
on distinct tapes is safe from multiple threads.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested primitive."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf; the tape is in an error state."""


class DegenerateVectorError(ValueError):
    """Vector with near-zero norm where a direction is required."""


class GraphError(ValueError):
    """Graph wiring problem: missing input, detached parameter, bad output."""


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    return v


def _require_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Node:
    """One recorded value on the tape.

    ``layer``/``pname`` are set only on parameter leaves; constants and
    intermediate results leave them as None.
    """

    __slots__ = ("value", "parents", "vjps", "layer", "pname")

    def __init__(self, value, parents=(), vjps=(), layer=None, pname=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.layer = layer
        self.pname = pname

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" {self.layer}/{self.pname}" if self.layer else ""
        return f"Node(shape={self.value.shape}{tag})"


def const(x) -> Node:
    """Wrap an array (or scalar) as a constant leaf."""
    v = _as_value(x)
    _require_finite(v, "const")
    return Node(v)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


# ---------------------------------------------------------------------------
# primitives


def add(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        out = av + bv
        vjps = (lambda g: g, lambda g: g)
    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        out = av + bv[None, :]
        vjps = (lambda g: g, lambda g: g.sum(axis=0))
    elif av.ndim == 1 and bv.ndim == 2 and bv.shape[1] == av.shape[0]:
        out = av[None, :] + bv
        vjps = (lambda g: g.sum(axis=0), lambda g: g)
    else:
        raise ShapeError(f"add: incompatible shapes {av.shape} and {bv.shape}")
    _require_finite(out, "add")
    return Node(out, (a, b), vjps)


def scale(a: Node, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: non-finite coefficient")
    out = a.value * c
    _require_finite(out, "scale")
    return Node(out, (a,), (lambda g: g * c,))


def sub(a: Node, b: Node) -> Node:
    return add(a, scale(as_node(b), -1.0))


def mul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mul: shapes {a.value.shape} != {b.value.shape}")
    av, bv = a.value, b.value
    out = av * bv
    _require_finite(out, "mul")
    return Node(out, (a, b), (lambda g: g * bv, lambda g: g * av))


def matmul(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = av @ bv
        vjps = (lambda g: g @ bv.T, lambda g: av.T @ g)
    elif av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = av @ bv
        vjps = (lambda g: bv @ g, lambda g: np.outer(av, g))
    elif av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = av @ bv
        vjps = (lambda g: np.outer(g, bv), lambda g: av.T @ g)
    else:
        raise ShapeError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")
    _require_finite(out, "matmul")
    return Node(out, (a, b), vjps)


def tanh(a: Node) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    _require_finite(out, "tanh")
    return Node(out, (a,), (lambda g: g * (1.0 - out * out),))


def square(a: Node) -> Node:
    a = as_node(a)
    av = a.value
    out = av * av
    _require_finite(out, "square")
    return Node(out, (a,), (lambda g: g * 2.0 * av,))


def absval(a: Node) -> Node:
    a = as_node(a)
    av = a.value
    out = np.abs(av)
    sgn = np.sign(av)
    return Node(out, (a,), (lambda g: g * sgn,))


def asum(a: Node) -> Node:
    a = as_node(a)
    av = a.value
    out = np.asarray(av.sum())
    _require_finite(out, "sum")
    return Node(out, (a,), (lambda g: np.broadcast_to(g, av.shape).copy(),))


def amean(a: Node) -> Node:
    a = as_node(a)
    av = a.value
    n = av.size
    if n == 0:
        raise ShapeError("mean of empty tensor")
    out = np.asarray(av.mean())
    _require_finite(out, "mean")
    return Node(out, (a,), (lambda g: np.broadcast_to(g / n, av.shape).copy(),))


def rowsum(a: Node) -> Node:
    a = as_node(a)
    av = a.value
    if av.ndim != 2:
        raise ShapeError(f"rowsum expects a matrix, got shape {av.shape}")
    out = av.sum(axis=1)
    _require_finite(out, "rowsum")
    return Node(out, (a,), (lambda g: np.repeat(g[:, None], av.shape[1], axis=1),))


def l2norm(a: Node) -> Node:
    a = as_node(a)
    av = a.value
    n = float(np.sqrt((av * av).sum()))
    out = np.asarray(n)

    def vjp(g):
        # subgradient 0 at the origin
        return g * av / max(n, NORM_EPS)

    return Node(out, (a,), (vjp,))


def rownorm(a: Node) -> Node:
    a = as_node(a)
    av = a.value
    if av.ndim != 2:
        raise ShapeError(f"rownorm expects a matrix, got shape {av.shape}")
    norms = np.sqrt((av * av).sum(axis=1))
    safe = np.maximum(norms, NORM_EPS)

    def vjp(g):
        return (g / safe)[:, None] * av

    return Node(norms, (a,), (vjp,))


def dot(a: Node, b: Node) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"dot: shapes {av.shape} != {bv.shape}")
    out = np.asarray((av * bv).sum())
    _require_finite(out, "dot")
    return Node(out, (a, b), (lambda g: g * bv, lambda g: g * av))


def concat(parts: Sequence[Node]) -> Node:
    """Flatten each part and concatenate into a single 1-d vector."""
    parts = [as_node(p) for p in parts]
    if not parts:
        raise ShapeError("concat of nothing")
    flats = [p.value.ravel() for p in parts]
    out = np.concatenate(flats)
    offsets = np.cumsum([0] + [f.size for f in flats])
    vjps = []
    for i, p in enumerate(parts):
        lo, hi = offsets[i], offsets[i + 1]
        shp = p.value.shape
        vjps.append(lambda g, lo=lo, hi=hi, shp=shp: g[lo:hi].reshape(shp))
    return Node(out, tuple(parts), tuple(vjps))


def hstack(a: Node, b: Node) -> Node:
    """Column-concatenate two matrices with equal row counts."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[0] != bv.shape[0]:
        raise ShapeError(f"hstack: shapes {av.shape} and {bv.shape}")
    out = np.hstack([av, bv])
    k = av.shape[1]
    return Node(out, (a, b), (lambda g: g[:, :k], lambda g: g[:, k:]))


def transpose(a: Node) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.value.shape}")
    return Node(a.value.T.copy(), (a,), (lambda g: g.T,))


def normalize(a: Node) -> Node:
    """Euclidean normalization: 1-d vectors become unit vectors, matrices
    are normalized row-wise.  Near-zero norms are an error, not a clamp."""
    a = as_node(a)
    av = a.value
    if av.ndim == 1:
        n = float(np.sqrt((av * av).sum()))
        if n < NORM_EPS:
            raise DegenerateVectorError("normalize: vector norm below 1e-12")
        y = av / n

        def vjp(g):
            return (g - (g * y).sum() * y) / n

        return Node(y, (a,), (vjp,))
    if av.ndim == 2:
        norms = np.sqrt((av * av).sum(axis=1))
        if np.any(norms < NORM_EPS):
            bad = np.nonzero(norms < NORM_EPS)[0]
            raise DegenerateVectorError(f"normalize: rows {bad.tolist()} have near-zero norm")
        y = av / norms[:, None]

        def vjp(g):
            proj = (g * y).sum(axis=1, keepdims=True)
            return (g - proj * y) / norms[:, None]

        return Node(y, (a,), (vjp,))
    raise ShapeError(f"normalize expects a vector or matrix, got shape {av.shape}")


def unit(v: np.ndarray) -> np.ndarray:
    """Plain-numpy counterpart of normalize for evaluation-time code."""
    v = _as_value(v)
    n = float(np.linalg.norm(v))
    if n < NORM_EPS:
        raise DegenerateVectorError("unit: vector norm below 1e-12")
    return v / n


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named float64 parameter arrays grouped by layer identifier.

    Insertion order fixes the flattening layout used by gradient maps and
    optimizer updates.  Arrays handed out by ``leaves`` are the live ones;
    ``set_flat`` replaces them with fresh arrays rather than writing in
    place, so outstanding tapes keep the values they were built with.
    """

    def __init__(self):
        self._layers: dict[str, dict[str, np.ndarray]] = {}

    def add(self, layer: str, name: str, value) -> None:
        v = _as_value(value).copy()
        _require_finite(v, "param")
        group = self._layers.setdefault(layer, {})
        if name in group:
            raise GraphError(f"duplicate parameter {layer}/{name}")
        group[name] = v

    @property
    def layer_ids(self) -> list[str]:
        return list(self._layers.keys())

    def layer_size(self, layer: str) -> int:
        return sum(v.size for v in self._layers[layer].values())

    def layer_sizes(self) -> dict[str, int]:
        return {layer: self.layer_size(layer) for layer in self._layers}

    def get(self, layer: str, name: str) -> np.ndarray:
        return self._layers[layer][name]

    def leaves(self) -> dict[str, dict[str, Node]]:
        """Fresh leaf nodes bound to the current parameter arrays."""
        return {
            layer: {name: Node(v, layer=layer, pname=name) for name, v in group.items()}
            for layer, group in self._layers.items()
        }

    def flat(self, layer: str) -> np.ndarray:
        group = self._layers[layer]
        return np.concatenate([v.ravel() for v in group.values()])

    def set_flat(self, layer: str, vec: np.ndarray) -> None:
        group = self._layers[layer]
        vec = _as_value(vec)
        if vec.shape != (self.layer_size(layer),):
            raise ShapeError(f"set_flat: expected {self.layer_size(layer)} values for layer '{layer}'")
        _require_finite(vec, "set_flat")
        off = 0
        for name, v in group.items():
            group[name] = vec[off : off + v.size].reshape(v.shape).copy()
            off += v.size

    def state(self) -> dict[str, np.ndarray]:
        return {f"{layer}/{name}": v.copy() for layer, group in self._layers.items() for name, v in group.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for key, v in state.items():
            layer, name = key.rsplit("/", 1)
            if layer not in self._layers or name not in self._layers[layer]:
                raise GraphError(f"unknown parameter '{key}' in state")
            if self._layers[layer][name].shape != v.shape:
                raise ShapeError(f"state shape mismatch for '{key}'")
            self._layers[layer][name] = _as_value(v).copy()


# ---------------------------------------------------------------------------
# backward


def _toposort(out: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(out, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _backprop(out: Node) -> tuple[dict[int, np.ndarray], list[Node]]:
    if out.value.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {out.value.shape}")
    order = _toposort(out)
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = contrib if acc is None else acc + contrib
    return grads, order


GradientMap = dict[str, np.ndarray]


def backward(out: Node, params: ParamStore) -> GradientMap:
    """Exact reverse-mode gradients of a scalar output, one flattened
    vector per layer of ``params``.  Layers the output does not depend on
    get zero vectors; parameter leaves from a foreign store are an error."""
    grads, order = _backprop(out)
    named: dict[tuple[str, str], np.ndarray] = {}
    for node in order:
        if node.layer is None:
            continue
        if node.layer not in params._layers or node.pname not in params._layers[node.layer]:
            raise GraphError(f"detached parameter {node.layer}/{node.pname}")
        g = grads.get(id(node))
        if g is None:
            continue
        key = (node.layer, node.pname)
        named[key] = g if key not in named else named[key] + g
    gmap: GradientMap = {}
    for layer, group in params._layers.items():
        pieces = []
        for name, v in group.items():
            g = named.get((layer, name))
            pieces.append(np.zeros(v.size) if g is None else g.ravel())
        gmap[layer] = np.concatenate(pieces) if pieces else np.zeros(0)
    return gmap


def grad_wrt(out: Node, leaves: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of a scalar output with respect to explicit leaf nodes."""
    grads, _ = _backprop(out)
    return [grads.get(id(leaf), np.zeros_like(leaf.value)) for leaf in leaves]


class Graph:
    """A differentiable function of named inputs over a ParamStore.

    ``build(leaves, inputs)`` constructs the tape from parameter leaf nodes
    and input nodes; ``evaluate`` returns the output node with the tape
    attached, and ``backward`` folds a scalar output into per-layer
    gradients.
    """

    def __init__(self, params: ParamStore, build: Callable, input_names: Iterable[str] = ()):
        self.params = params
        self._build = build
        self._input_names = tuple(input_names)

    def evaluate(self, **inputs) -> Node:
        given = set(inputs)
        expected = set(self._input_names)
        if self._input_names and given != expected:
            raise GraphError(f"inputs {sorted(given)} do not match expected {sorted(expected)}")
        nodes = {name: const(v) for name, v in inputs.items()}
        return self._build(self.params.leaves(), nodes)

    def backward(self, out: Node) -> GradientMap:
        return backward(out, self.params)


# ---------------------------------------------------------------------------
# gradient-map arithmetic used by the training loop


def zero_gradient_map(params: ParamStore) -> GradientMap:
    return {layer: np.zeros(params.layer_size(layer)) for layer in params.layer_ids}


def combine_gradient_maps(weighted: Sequence[tuple[float, GradientMap]]) -> GradientMap:
    if not weighted:
        raise ValueError("nothing to combine")
    out: GradientMap = {}
    for w, gmap in weighted:
        for layer, g in gmap.items():
            if layer in out:
                out[layer] = out[layer] + w * g
            else:
                out[layer] = w * g
    return out


def gradient_map_norm(gmap: GradientMap) -> float:
    total = 0.0
    for g in gmap.values():
        total += float((g * g).sum())
    return float(np.sqrt(total))
