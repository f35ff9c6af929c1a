"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine is a flat tape: a ``Graph`` holds nodes in insertion order, every
node's inputs point at earlier nodes (acyclic by construction), values are
computed eagerly, and ``backward`` walks the tape in reverse applying the
chain rule. Gradients accumulate, both across multiple consumers of a node
and across multiple leaf nodes wrapping the same ``Tensor`` (which is how
weight tying works upstream).
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when an op's input shapes do not conform."""


def _stable_sigmoid(x):
    # piecewise form avoids overflow in exp for very negative inputs
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _stable_softmax(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


class Tensor:
    """Dense float64 array with an optional gradient slot.

    Tensors with ``requires_grad`` collect gradients during ``Graph.backward``;
    gradients accumulate until ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "inputs", "tensor", "bwd")

    def __init__(self, op, inputs, tensor, bwd):
        self.op = op
        self.inputs = inputs
        self.tensor = tensor
        self.bwd = bwd


# ---------------------------------------------------------------------------
# op kernels: each returns (output array, backward closure). The closure maps
# the output gradient to per-input gradients, aligned with the input order.


def _shapes(op, *arrays):
    return f"{op}: got shapes {[a.shape for a in arrays]}"


def _op_matmul(a, b):
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(_shapes("matmul (inner dims differ)", a, b))
        out = a @ b
        return out, lambda g: (g @ b.T, a.T @ g)
    if a.ndim == 2 and b.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(_shapes("matmul (inner dims differ)", a, b))
        out = a @ b
        return out, lambda g: (np.outer(g, b), a.T @ g)
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ShapeError(_shapes("matmul (inner dims differ)", a, b))
        out = a @ b
        return out, lambda g: (b @ g, np.outer(a, g))
    raise ShapeError(_shapes("matmul (expects 2-D x 2-D, 2-D x 1-D or 1-D x 2-D)", a, b))


def _op_add(a, b):
    if a.shape != b.shape:
        raise ShapeError(_shapes("add (shape mismatch)", a, b))
    return a + b, lambda g: (g, g)


def _op_add_broadcast_col(m, v):
    if m.ndim != 2 or v.ndim != 1 or v.shape[0] != m.shape[0]:
        raise ShapeError(_shapes("add_broadcast_col (expects matrix, row-count vector)", m, v))
    return m + v[:, None], lambda g: (g, g.sum(axis=1))


def _op_elementwise_mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(_shapes("elementwise_mul (shape mismatch)", a, b))
    return a * b, lambda g: (g * b, g * a)


def _op_tanh(x):
    y = np.tanh(x)
    return y, lambda g: (g * (1.0 - y * y),)


def _op_sigmoid(x):
    y = _stable_sigmoid(np.asarray(x, dtype=np.float64))
    return y, lambda g: (g * y * (1.0 - y),)


def _op_softmax_axis(x, axis=-1):
    if x.ndim == 0:
        raise ShapeError("softmax_axis: scalar input has no axis")
    if not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax_axis: axis {axis} invalid for shape {x.shape}")
    y = _stable_softmax(x, axis)

    def bwd(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return y, bwd


def _op_concat_rows(*vecs):
    if len(vecs) < 2 or any(v.ndim != 1 for v in vecs):
        raise ShapeError(_shapes("concat_rows (expects >=2 vectors)", *vecs))
    sizes = [v.shape[0] for v in vecs]
    out = np.concatenate(vecs)

    def bwd(g):
        grads, ofs = [], 0
        for n in sizes:
            grads.append(g[ofs:ofs + n])
            ofs += n
        return tuple(grads)

    return out, bwd


def _op_row_lookup(table, row):
    if table.ndim != 2:
        raise ShapeError(_shapes("row_lookup (expects matrix)", table))
    if not 0 <= row < table.shape[0]:
        raise ShapeError(f"row_lookup: row {row} out of range for {table.shape[0]} rows")
    out = table[row].copy()

    def bwd(g):
        gt = np.zeros_like(table)
        gt[row] = g
        return (gt,)

    return out, bwd


def _op_dot(a, b):
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(_shapes("dot (expects equal-length vectors)", a, b))
    return np.asarray(a @ b), lambda g: (g * b, g * a)


def _op_scale(x, s):
    if s.size != 1:
        raise ShapeError(_shapes("scale (second input must be scalar)", x, s))
    sv = float(s)
    out = x * sv

    def bwd(g):
        return (g * sv, np.asarray(np.sum(g * x)).reshape(s.shape))

    return out, bwd


def _op_log(x):
    return np.log(x), lambda g: (g / x,)


def _op_slice_rows(x, start, stop):
    if x.ndim not in (1, 2):
        raise ShapeError(_shapes("slice_rows (expects vector or matrix)", x))
    if not 0 <= start < stop <= x.shape[0]:
        raise ShapeError(f"slice_rows: [{start}:{stop}] invalid for {x.shape[0]} rows")
    out = x[start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(x)
        gx[start:stop] = g
        return (gx,)

    return out, bwd


def _op_stack_cols(*vecs):
    if not vecs or any(v.ndim != 1 for v in vecs):
        raise ShapeError(_shapes("stack_cols (expects vectors)", *vecs))
    n = vecs[0].shape[0]
    if any(v.shape[0] != n for v in vecs):
        raise ShapeError(_shapes("stack_cols (length mismatch)", *vecs))
    out = np.stack(vecs, axis=1)

    def bwd(g):
        return tuple(g[:, i] for i in range(len(vecs)))

    return out, bwd


_OPS = {
    "matmul": _op_matmul,
    "add": _op_add,
    "add_broadcast_col": _op_add_broadcast_col,
    "elementwise_mul": _op_elementwise_mul,
    "tanh": _op_tanh,
    "sigmoid": _op_sigmoid,
    "softmax_axis": _op_softmax_axis,
    "concat_rows": _op_concat_rows,
    "row_lookup": _op_row_lookup,
    "dot": _op_dot,
    "scale": _op_scale,
    "log": _op_log,
    "slice_rows": _op_slice_rows,
    "stack_cols": _op_stack_cols,
}


class Graph:
    """Append-only computation tape. Node ids are tape indices.

    ``check_finite=True`` asserts every forward output is finite (debug mode;
    off by default to keep the training loop fast).
    """

    def __init__(self, check_finite=False):
        self.nodes = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    def leaf(self, tensor):
        """Insert a Tensor as a leaf node and return its node id."""
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self.nodes.append(Node("leaf", (), tensor, None))
        return len(self.nodes) - 1

    def constant(self, value):
        """Leaf with requires_grad=False, from any array-like."""
        return self.leaf(Tensor(value))

    def value(self, node_id):
        return self.nodes[node_id].tensor.data

    def tensor(self, node_id):
        return self.nodes[node_id].tensor

    def apply(self, op, *inputs, **attrs):
        """Run ``op`` on existing node ids, append the result, return its id."""
        fn = _OPS.get(op)
        if fn is None:
            raise ValueError(f"unknown op kind: {op!r}")
        n = len(self.nodes)
        for i in inputs:
            if not 0 <= i < n:
                raise ValueError(f"{op}: input node id {i} not in graph")
        arrays = tuple(self.nodes[i].tensor.data for i in inputs)
        out, bwd = fn(*arrays, **attrs)
        if self.check_finite and not np.all(np.isfinite(out)):
            raise FloatingPointError(f"{op}: non-finite output")
        self.nodes.append(Node(op, inputs, Tensor(out), bwd))
        return len(self.nodes) - 1

    # thin named wrappers, so call sites read like the math
    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def add_broadcast_col(self, m, v):
        return self.apply("add_broadcast_col", m, v)

    def elementwise_mul(self, a, b):
        return self.apply("elementwise_mul", a, b)

    def tanh(self, x):
        return self.apply("tanh", x)

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def softmax(self, x, axis=-1):
        return self.apply("softmax_axis", x, axis=axis)

    def concat(self, *vecs):
        return self.apply("concat_rows", *vecs)

    def row_lookup(self, table, row):
        return self.apply("row_lookup", table, row=row)

    def dot(self, a, b):
        return self.apply("dot", a, b)

    def scale(self, x, s):
        return self.apply("scale", x, s)

    def log(self, x):
        return self.apply("log", x)

    def slice_rows(self, x, start, stop):
        return self.apply("slice_rows", x, start=start, stop=stop)

    def stack_cols(self, *vecs):
        return self.apply("stack_cols", *vecs)

    def backward(self, loss):
        """Populate gradients of ``loss`` on every requires_grad leaf tensor.

        Gradients sum over all paths; leaf tensors accumulate (call
        ``zero_grad`` between independent backward passes).
        """
        lt = self.nodes[loss].tensor
        if lt.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {lt.data.shape}")
        grads = [None] * len(self.nodes)
        grads[loss] = np.ones_like(lt.data)
        for nid in range(loss, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.bwd is None:
                if node.tensor.requires_grad:
                    node.tensor.accumulate_grad(g)
                continue
            for i, gi in zip(node.inputs, node.bwd(g)):
                if gi is None:
                    continue
                if grads[i] is None:
                    grads[i] = np.asarray(gi, dtype=np.float64).copy()
                else:
                    grads[i] = grads[i] + gi
            grads[nid] = None  # free as we go


def grad_check(f, params, eps=1e-5):
    """Compare analytic gradients of a scalar function against central differences.

    ``f(params)`` must deterministically build a fresh Graph and return
    ``(graph, loss_node_id)``. ``params`` is a sequence of requires_grad
    Tensors referenced by ``f``. Returns the max over all parameter entries of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for p in params:
        p.zero_grad()
    graph, loss = f(params)
    graph.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value():
        g, l = f(params)
        return float(g.value(l))

    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(aflat[i] - numeric) / max(1e-8, abs(aflat[i]) + abs(numeric))
            worst = max(worst, err)
    return worst
