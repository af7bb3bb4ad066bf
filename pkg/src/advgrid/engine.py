"""Minimal reverse-mode autodiff engine on dense float64 arrays.

A Graph records primitive operations during a forward evaluation; reverse
traversal of the recording order accumulates exact gradients. Only the
handful of primitives needed for small classifiers and differentiable
image warping is provided.
"""

import numpy as np


class EngineError(Exception):
    """Base class for compute-engine failures."""


class DimensionError(EngineError):
    """Operand shapes do not agree."""


class NumericError(EngineError):
    """A non-finite value was produced or supplied."""


class GraphLookupError(EngineError):
    """A node was not recorded on the graph being differentiated."""


def as_array(x):
    """Coerce to a float64 ndarray, rejecting non-finite values."""
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite value in tensor")
    return a


class Node:
    """One recorded value in a Graph. Do not construct directly."""

    __slots__ = ("graph", "value", "idx", "parents")

    def __init__(self, graph, value, idx, parents):
        self.graph = graph
        self.value = value
        self.idx = idx
        # parents: tuple of (Node, vjp) where vjp maps the output adjoint
        # to this parent's adjoint contribution
        self.parents = parents


class Graph:
    """Tape of primitive operations; single-owner during recording."""

    def __init__(self):
        self._nodes = []

    def input(self, value):
        """Register a differentiable input and return its node."""
        return self._record(as_array(value), ())

    def _record(self, value, parents):
        node = Node(self, value, len(self._nodes), parents)
        self._nodes.append(node)
        return node

    def backward(self, output, cotangent):
        """Reverse-accumulate adjoints seeded with `cotangent` at `output`.

        Returns a list of adjoint arrays indexed like the tape (None where
        no gradient flows). Traversal is the exact reverse of recording
        order, so repeated runs are bit-identical.
        """
        if output.graph is not self:
            raise GraphLookupError("output node belongs to a different graph")
        seed = np.asarray(cotangent, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise DimensionError("cotangent shape does not match output")
        adjoints = [None] * len(self._nodes)
        adjoints[output.idx] = seed
        for idx in range(output.idx, -1, -1):
            adj = adjoints[idx]
            if adj is None:
                continue
            for parent, vjp in self._nodes[idx].parents:
                contrib = vjp(adj)
                if adjoints[parent.idx] is None:
                    adjoints[parent.idx] = contrib.copy()
                else:
                    adjoints[parent.idx] += contrib
        return adjoints


def gradient(graph, output, wrt):
    """Gradient of a scalar output node with respect to an input node."""
    if output.value.size != 1:
        raise DimensionError("gradient requires a scalar output")
    if wrt.graph is not graph or wrt.idx >= len(graph._nodes) or graph._nodes[wrt.idx] is not wrt:
        raise GraphLookupError("wrt node was not recorded on this graph")
    adjoints = graph.backward(output, np.ones_like(output.value))
    adj = adjoints[wrt.idx]
    if adj is None:
        return np.zeros_like(wrt.value)
    return adj


def _value(x):
    return x.value if isinstance(x, Node) else as_array(x)


def _graph_of(*ops):
    for op in ops:
        if isinstance(op, Node):
            return op.graph
    raise GraphLookupError("at least one operand must be a graph node")


def _record(graph, value, pairs):
    value = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(value)):
        raise NumericError("operation produced a non-finite value")
    parents = tuple((op, vjp) for op, vjp in pairs if isinstance(op, Node))
    return graph._record(value, parents)


def add(a, b):
    g = _graph_of(a, b)
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise DimensionError(f"add: {av.shape} vs {bv.shape}")
    return _record(g, av + bv, [(a, lambda adj: adj), (b, lambda adj: adj)])


def sub(a, b):
    g = _graph_of(a, b)
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise DimensionError(f"sub: {av.shape} vs {bv.shape}")
    return _record(g, av - bv, [(a, lambda adj: adj), (b, lambda adj: -adj)])


def mul(a, b):
    g = _graph_of(a, b)
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape:
        raise DimensionError(f"mul: {av.shape} vs {bv.shape}")
    return _record(g, av * bv, [(a, lambda adj: adj * bv), (b, lambda adj: adj * av)])


def neg(a):
    g = _graph_of(a)
    return _record(g, -_value(a), [(a, lambda adj: -adj)])


def log(a):
    g = _graph_of(a)
    av = _value(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _record(g, out, [(a, lambda adj: adj / av)])


def exp(a):
    g = _graph_of(a)
    with np.errstate(over="ignore"):
        out = np.exp(_value(a))
    return _record(g, out, [(a, lambda adj: adj * out)])


def asum(a):
    """Sum of all elements, as a 0-d node."""
    g = _graph_of(a)
    av = _value(a)
    return _record(g, np.sum(av), [(a, lambda adj: np.full_like(av, float(adj)))])


def pick(a, i):
    """Scalar element a[i] of a vector node."""
    g = _graph_of(a)
    av = _value(a)
    if av.ndim != 1:
        raise DimensionError("pick expects a vector")
    i = int(i)

    def vjp(adj):
        out = np.zeros_like(av)
        out[i] = float(adj)
        return out

    return _record(g, av[i], [(a, vjp)])


def relu(a):
    """Elementwise max(0, x); subgradient 0 at exactly 0."""
    g = _graph_of(a)
    av = _value(a)
    mask = av > 0.0
    return _record(g, np.where(mask, av, 0.0), [(a, lambda adj: adj * mask)])


def linear_forward(W, x, b=None):
    """W @ x (+ b) for a weight matrix and an input vector."""
    ops = (W, x) if b is None else (W, x, b)
    g = _graph_of(*ops)
    Wv, xv = _value(W), _value(x)
    if Wv.ndim != 2 or xv.ndim != 1 or Wv.shape[1] != xv.shape[0]:
        raise DimensionError(f"linear_forward: {Wv.shape} @ {xv.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = Wv @ xv
    pairs = [(W, lambda adj: np.outer(adj, xv)), (x, lambda adj: Wv.T @ adj)]
    if b is not None:
        bv = _value(b)
        if bv.shape != out.shape:
            raise DimensionError(f"linear_forward bias: {bv.shape}")
        out = out + bv
        pairs.append((b, lambda adj: adj))
    return _record(g, out, pairs)


def softmax_values(z):
    """Plain-array stable softmax (max-shifted); sums to 1."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax: non-finite input")
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def softmax(z):
    g = _graph_of(z)
    zv = _value(z)
    if zv.ndim != 1 or zv.shape[0] < 2:
        raise DimensionError("softmax expects a vector of length >= 2")
    s = softmax_values(zv)
    return _record(g, s, [(z, lambda adj: s * (adj - np.dot(adj, s)))])


def cross_entropy(z, y):
    """-log softmax(z)[y] as a fused 0-d node with exact adjoint."""
    g = _graph_of(z)
    zv = _value(z)
    y = int(y)
    if not 0 <= y < zv.shape[0]:
        raise DimensionError("cross_entropy: label out of range")
    m = np.max(zv)
    value = m + np.log(np.sum(np.exp(zv - m))) - zv[y]
    s = softmax_values(zv)

    def vjp(adj):
        out = s * float(adj)
        out[y] -= float(adj)
        return out

    return _record(g, value, [(z, vjp)])


def reshape(a, shape):
    g = _graph_of(a)
    av = _value(a)
    shape = tuple(shape)
    return _record(g, av.reshape(shape), [(a, lambda adj: adj.reshape(av.shape))])


def _corner_setup(image, coords):
    H, W = image.shape
    r = np.clip(coords[..., 0], 0.0, H - 1.0)
    c = np.clip(coords[..., 1], 0.0, W - 1.0)
    r0 = np.minimum(np.floor(r), H - 2).astype(np.intp)
    c0 = np.minimum(np.floor(c), W - 2).astype(np.intp)
    tr = r - r0
    tc = c - c0
    return r0, c0, tr, tc


def bilinear_sample(image, coords):
    """Sample an HxW image at fractional (row, col) coordinates.

    Out-of-range coordinates are clamped to the image border; integer
    gridlines use the right-sided derivative. Differentiable in both the
    image and the coordinates.
    """
    g = _graph_of(image, coords)
    iv, cv = _value(image), _value(coords)
    if iv.ndim != 2 or cv.shape[-1] != 2:
        raise DimensionError(f"bilinear_sample: image {iv.shape}, coords {cv.shape}")
    if iv.shape[0] < 2 or iv.shape[1] < 2:
        raise DimensionError("bilinear_sample needs at least a 2x2 image")
    H, W = iv.shape
    r0, c0, tr, tc = _corner_setup(iv, cv)
    i00 = iv[r0, c0]
    i01 = iv[r0, c0 + 1]
    i10 = iv[r0 + 1, c0]
    i11 = iv[r0 + 1, c0 + 1]
    w00 = (1 - tr) * (1 - tc)
    w01 = (1 - tr) * tc
    w10 = tr * (1 - tc)
    w11 = tr * tc
    out = w00 * i00 + w01 * i01 + w10 * i10 + w11 * i11

    def vjp_image(adj):
        grad = np.zeros_like(iv)
        np.add.at(grad, (r0, c0), adj * w00)
        np.add.at(grad, (r0, c0 + 1), adj * w01)
        np.add.at(grad, (r0 + 1, c0), adj * w10)
        np.add.at(grad, (r0 + 1, c0 + 1), adj * w11)
        return grad

    def vjp_coords(adj):
        # clamp is flat outside the valid rectangle
        mr = (cv[..., 0] >= 0.0) & (cv[..., 0] <= H - 1.0)
        mc = (cv[..., 1] >= 0.0) & (cv[..., 1] <= W - 1.0)
        dr = (1 - tc) * (i10 - i00) + tc * (i11 - i01)
        dc = (1 - tr) * (i01 - i00) + tr * (i11 - i10)
        grad = np.empty_like(cv)
        grad[..., 0] = adj * dr * mr
        grad[..., 1] = adj * dc * mc
        return grad

    return _record(g, out, [(image, vjp_image), (coords, vjp_coords)])
