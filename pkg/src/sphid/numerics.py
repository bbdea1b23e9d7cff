"""Dense float64 tensors with reverse-mode autodiff, plus unit-sphere geometry.

The engine is define-by-run: every operation records its parents and a
backward closure on the result node, and ``backward`` replays the tape in
reverse topological order. Tensors are rank <= 2 (scalars, vectors,
matrices); the only broadcasting supported is row-vector-over-matrix and
scalar-over-anything, which is all the models here need.
"""

from __future__ import annotations

import numpy as np

DEGENERATE_NORM = 1e-12


class DegenerateVectorError(ValueError):
    """Raised when a vector with (near-)zero norm would be normalized."""


class Tensor:
    """A dense float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 2:
            raise ValueError(f"rank {self.data.ndim} tensors are not supported")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def parameter(data, name=None):
    """Create a leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data):
    return Tensor(data, requires_grad=False)


def as_tensor(x):
    return x if isinstance(x, Tensor) else constant(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _reduce_to(g, shape):
    """Collapse an upstream gradient onto a broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=tuple(parents), backward=backward if req else None)


def _check_broadcast(a, b):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ValueError(f"incompatible shapes {sa} and {sb}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, -_reduce_to(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: _accumulate(a, -g))


def mul(a, b):
    """Elementwise product; one operand may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ValueError(f"mul needs matching shapes or a scalar, got {a.data.shape} and {b.data.shape}")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ra, rb = a.data.ndim, b.data.ndim
    if (ra, rb) not in ((2, 2), (1, 2), (2, 1)):
        raise ValueError(f"matmul supports (2,2), (1,2), (2,1) ranks, got ({ra},{rb})")
    out_data = a.data @ b.data

    def backward(g):
        if (ra, rb) == (2, 2):
            _accumulate(a, g @ b.data.T)
            _accumulate(b, a.data.T @ g)
        elif (ra, rb) == (1, 2):
            _accumulate(a, b.data @ g)
            _accumulate(b, np.outer(a.data, g))
        else:
            _accumulate(a, np.outer(g, b.data))
            _accumulate(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _node(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def dot(u, v):
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ValueError("dot expects two vectors of equal length")
    out_data = np.asarray(u.data @ v.data)

    def backward(g):
        _accumulate(u, g * v.data)
        _accumulate(v, g * u.data)

    return _node(out_data, (u, v), backward)


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = _node(y, (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * (1.0 - y * y))
    return out


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    out = _node(y, (a,), None)
    if out.requires_grad:
        out._backward = lambda g: _accumulate(a, g * y)
    return out


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def softmax(a):
    """Row-wise softmax (last axis), computed with max subtraction."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (a,), backward)


def log_softmax(a):
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def backward(g):
        _accumulate(a, g - p * g.sum(axis=-1, keepdims=True))

    return _node(y, (a,), backward)


def normalize(a):
    """L2-normalize a vector, or each row of a matrix, on the tape.

    Backward applies the exact normalization Jacobian, so the gradient that
    reaches the input is orthogonal to the output direction.
    """
    a = as_tensor(a)
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    if np.any(norms < DEGENERATE_NORM):
        raise DegenerateVectorError("cannot normalize a (near-)zero vector")
    # overflowed norms propagate as NaN so divergence checks can catch them
    norms = np.where(np.isfinite(norms), norms, np.nan)
    y = a.data / norms

    def backward(g):
        _accumulate(a, (g - (g * y).sum(axis=-1, keepdims=True) * y) / norms)

    return _node(y, (a,), backward)


def tsum(a):
    a = as_tensor(a)
    return _node(np.asarray(a.data.sum()), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.data.shape).copy()))


def tmean(a):
    a = as_tensor(a)
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: _accumulate(a, np.broadcast_to(g / n, a.data.shape).copy()))


def sum_axis(a, axis):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("sum_axis expects a matrix")
    y = a.data.sum(axis=axis)

    def backward(g):
        _accumulate(a, np.expand_dims(g, axis) * np.ones_like(a.data))

    return _node(y, (a,), backward)


def mean_axis(a, axis):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("mean_axis expects a matrix")
    n = a.data.shape[axis]
    y = a.data.mean(axis=axis)

    def backward(g):
        _accumulate(a, np.expand_dims(g, axis) * np.ones_like(a.data) / n)

    return _node(y, (a,), backward)


def gather_rows(table, indices):
    """Select rows of a matrix by integer index; duplicates accumulate grads."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)
    if table.data.ndim != 2 or idx.ndim != 1:
        raise ValueError("gather_rows expects a matrix and a 1-D index array")
    y = table.data[idx]

    def backward(g):
        # scatter straight into the accumulator; a dense temporary per call
        # would dominate the backward pass for large embedding tables
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _node(y, (table,), backward)


def take_row(m, i):
    """Extract row i of a matrix as a vector."""
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ValueError("take_row expects a matrix")
    y = m.data[i].copy()

    def backward(g):
        if m.requires_grad:
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            m.grad[i] += g

    return _node(y, (m,), backward)


def select_per_row(m, indices):
    """Pick one entry per row: out[i] = m[i, indices[i]]."""
    m = as_tensor(m)
    idx = np.asarray(indices, dtype=np.intp)
    if m.data.ndim != 2 or idx.shape != (m.data.shape[0],):
        raise ValueError("select_per_row expects a matrix and one index per row")
    rows = np.arange(m.data.shape[0])
    y = m.data[rows, idx]

    def backward(g):
        if m.requires_grad:
            if m.grad is None:
                m.grad = np.zeros_like(m.data)
            m.grad[rows, idx] += g

    return _node(y, (m,), backward)


def concat(parts):
    """Concatenate 1-D tensors into one vector."""
    parts = [as_tensor(p) for p in parts]
    if any(p.data.ndim != 1 for p in parts):
        raise ValueError("concat expects vectors")
    sizes = [p.data.shape[0] for p in parts]
    y = np.concatenate([p.data for p in parts])

    def backward(g):
        off = 0
        for p, n in zip(parts, sizes):
            _accumulate(p, g[off:off + n])
            off += n

    return _node(y, tuple(parts), backward)


def concat_cols(parts):
    """Concatenate matrices along the column axis."""
    parts = [as_tensor(p) for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise ValueError("concat_cols expects matrices")
    widths = [p.data.shape[1] for p in parts]
    y = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        off = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, off:off + w])
            off += w

    return _node(y, tuple(parts), backward)


def stack_rows(vectors):
    """Stack 1-D tensors into a matrix, one per row."""
    vectors = [as_tensor(v) for v in vectors]
    if any(v.data.ndim != 1 for v in vectors):
        raise ValueError("stack_rows expects vectors")
    y = np.stack([v.data for v in vectors])

    def backward(g):
        for i, v in enumerate(vectors):
            _accumulate(v, g[i])

    return _node(y, tuple(vectors), backward)


def broadcast_row(v, n):
    """Tile a vector into n identical rows."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ValueError("broadcast_row expects a vector")
    y = np.tile(v.data, (n, 1))
    return _node(y, (v,), lambda g: _accumulate(v, g.sum(axis=0)))


def stopgrad(a):
    """Detach: forward value passes through, no gradient flows back."""
    a = as_tensor(a)
    return Tensor(a.data.copy(), requires_grad=False)


def where_rows(mask, safe_rows, a):
    """Replace masked rows of `a` with constant rows; grads flow only to kept rows."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    safe = np.asarray(safe_rows, dtype=np.float64)
    y = a.data.copy()
    y[mask] = safe[mask]

    def backward(g):
        gk = g.copy()
        gk[mask] = 0.0
        _accumulate(a, gk)

    return _node(y, (a,), backward)


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss node.

    Raises a contract error for non-scalar losses. Each reachable node is
    visited exactly once, in reverse topological order.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    # Iterative post-order DFS; graphs get deep enough to overflow recursion.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.grad = None


def finite_diff_grad(f, x, h=1e-4):
    """Central-difference gradient estimate of a scalar function at x."""
    x = np.asarray(x, dtype=np.float64)
    if h <= 0:
        raise ValueError("step must be positive")
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


# --- unit-sphere geometry (plain numpy, used for checks and diagnostics) ---


def l2_normalize(v):
    """Return v / ||v||, raising rather than dividing by a degenerate norm."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty vector")
    n = np.linalg.norm(v)
    if n < DEGENERATE_NORM:
        raise DegenerateVectorError("cannot normalize a (near-)zero vector")
    return v / n


def tangent_project(x, g):
    """Project g onto the tangent space of the unit sphere at x: g - (x.g)x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if abs(np.linalg.norm(x) - 1.0) > 1e-8:
        raise ValueError("tangent_project requires a unit base point")
    return g - (x @ g) * x


def retract(x, v):
    """Map the tangent step v at x back to the sphere: (x+v)/||x+v||."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(x) - 1.0) > 1e-8:
        raise ValueError("retract requires a unit base point")
    if abs(x @ v) > 1e-8:
        raise ValueError("retract requires a tangent direction")
    if not v.any():
        return x.copy()  # zero step is the identity, bit for bit
    s = x + v
    n = np.linalg.norm(s)
    if n < DEGENERATE_NORM:
        raise DegenerateVectorError("retraction collapsed to the origin")
    return s / n
