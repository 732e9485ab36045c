"""Reverse-mode automatic differentiation over numpy arrays.

Ops accept plain ndarrays or `Node`s. When at least one input is a Node the
op records itself on that Node's tape; otherwise it evaluates in raw numpy.
A forward pass written against these ops therefore serves both the traced
(training) and untraced (inference) paths with a single code path.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf, expit as _expit


class Tape:
    """Append-only record of primitive ops, in execution order.

    Execution order is a topological order of the computation graph, so the
    adjoint sweep is a single reversed pass that visits each recorded node
    exactly once. A tape is consumed by `backward` and cannot be reused.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False


class Node:
    __slots__ = ("value", "tape", "parents", "vjp")

    def __init__(self, value, tape, parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        if vjp is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar so formula code reads naturally
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def leaf(value, tape):
    """Wrap a parameter array as a gradient-tracked leaf on `tape`."""
    return Node(np.asarray(value), tape, parents=(), vjp=None)


def val(x):
    """Underlying ndarray of a Node, or the input unchanged."""
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _unbroadcast(grad, shape):
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _op(out_value, inputs, vjp_fn):
    tape = _tape_of(*inputs)
    if tape is None:
        return out_value
    parents = tuple(x for x in inputs if isinstance(x, Node))
    return Node(out_value, tape, parents, vjp_fn)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    av, bv = val(a), val(b)
    out = av + bv

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g, np.shape(av)))
        if isinstance(b, Node):
            grads.append(_unbroadcast(g, np.shape(bv)))
        return grads

    return _op(out, (a, b), vjp)


def sub(a, b):
    av, bv = val(a), val(b)
    out = av - bv

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g, np.shape(av)))
        if isinstance(b, Node):
            grads.append(_unbroadcast(-g, np.shape(bv)))
        return grads

    return _op(out, (a, b), vjp)


def mul(a, b):
    av, bv = val(a), val(b)
    out = av * bv

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g * bv, np.shape(av)))
        if isinstance(b, Node):
            grads.append(_unbroadcast(g * av, np.shape(bv)))
        return grads

    return _op(out, (a, b), vjp)


def div(a, b):
    av, bv = val(a), val(b)
    out = av / bv

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g / bv, np.shape(av)))
        if isinstance(b, Node):
            grads.append(_unbroadcast(-g * av / (bv * bv), np.shape(bv)))
        return grads

    return _op(out, (a, b), vjp)


def matmul(a, b):
    av, bv = val(a), val(b)
    out = av @ bv

    def vjp(g):
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g @ np.swapaxes(bv, -1, -2), np.shape(av)))
        if isinstance(b, Node):
            grads.append(_unbroadcast(np.swapaxes(av, -1, -2) @ g, np.shape(bv)))
        return grads

    return _op(out, (a, b), vjp)


def maximum(a, b):
    av, bv = val(a), val(b)
    out = np.maximum(av, bv)

    def vjp(g):
        # ties route to the first argument
        mask = av >= bv
        grads = []
        if isinstance(a, Node):
            grads.append(_unbroadcast(g * mask, np.shape(av)))
        if isinstance(b, Node):
            grads.append(_unbroadcast(g * ~mask, np.shape(bv)))
        return grads

    return _op(out, (a, b), vjp)


def absolute(a):
    av = val(a)
    out = np.abs(av)
    return _op(out, (a,), lambda g: [g * np.sign(av)])


def clip(a, lo, hi):
    av = val(a)
    out = np.clip(av, lo, hi)
    return _op(out, (a,), lambda g: [g * ((av >= lo) & (av <= hi))])


# ---------------------------------------------------------------------------
# shape


def reshape(a, shape):
    av = val(a)
    out = av.reshape(shape)
    return _op(out, (a,), lambda g: [g.reshape(av.shape)])


def swap_last2(a):
    av = val(a)
    out = np.swapaxes(av, -1, -2)
    return _op(out, (a,), lambda g: [np.swapaxes(g, -1, -2)])


def concat(parts, axis):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return [p for p, part in zip(pieces, parts) if isinstance(part, Node)]

    return _op(out, tuple(parts), vjp)


def take(a, idx, axis=0):
    """Differentiable gather of rows along `axis`; `idx` is a constant."""
    av = val(a)
    idx = np.asarray(idx)
    out = np.take(av, idx, axis=axis)

    def vjp(g):
        grad = np.zeros_like(av)
        if axis == 0:
            np.add.at(grad, idx, g)
        else:
            grad_m = np.moveaxis(grad, axis, 0)
            np.add.at(grad_m, idx, np.moveaxis(g, axis, 0))
        return [grad]

    return _op(out, (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    av = val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, av.shape).copy()]

    return _op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(a):
    av = val(a)
    out = _expit(av)
    return _op(out, (a,), lambda g: [g * out * (1.0 - out)])


def softplus(a):
    av = val(a)
    out = np.logaddexp(0.0, av)
    return _op(out, (a,), lambda g: [g * _expit(av)])


def exp(a):
    av = val(a)
    out = np.exp(av)
    return _op(out, (a,), lambda g: [g * out])


def log(a):
    av = val(a)
    out = np.log(av)
    return _op(out, (a,), lambda g: [g / av])


def log1p(a):
    av = val(a)
    out = np.log1p(av)
    return _op(out, (a,), lambda g: [g / (1.0 + av)])


def cos(a):
    av = val(a)
    out = np.cos(av)
    return _op(out, (a,), lambda g: [-g * np.sin(av)])


def sqrt(a):
    av = val(a)
    out = np.sqrt(av)
    return _op(out, (a,), lambda g: [0.5 * g / out])


def gelu(a):
    """Gaussian-CDF GELU, exact form: x * Phi(x)."""
    av = val(a)
    phi_cdf = 0.5 * (1.0 + _erf(av / np.sqrt(2.0)))
    out = av * phi_cdf

    def vjp(g):
        pdf = np.exp(-0.5 * av * av) / np.sqrt(2.0 * np.pi)
        return [g * (phi_cdf + av * pdf)]

    return _op(out, (a,), vjp)


# ---------------------------------------------------------------------------
# fused graph-model kernels (avoid materializing (B, k, H, dh, dh) tensors)


def weighted_outer_sum(w, a, b):
    """sum_k w[b,k,h] * outer(a[b,k,h,:], b[b,k,h,:]) -> (B, H, da, db)."""
    wv, av, bv = val(w), val(a), val(b)
    out = np.einsum("bkh,bkhi,bkhj->bhij", wv, av, bv, optimize=True)

    def vjp(g):
        grads = []
        if isinstance(w, Node):
            grads.append(np.einsum("bhij,bkhi,bkhj->bkh", g, av, bv, optimize=True))
        if isinstance(a, Node):
            grads.append(np.einsum("bkh,bhij,bkhj->bkhi", wv, g, bv, optimize=True))
        if isinstance(b, Node):
            grads.append(np.einsum("bkh,bhij,bkhi->bkhj", wv, g, av, optimize=True))
        return grads

    return _op(out, (w, a, b), vjp)


def weighted_matrix_sum(w, mats):
    """sum_k w[b,k,h] * mats[b,k,h,:,:] -> (B, H, d, d); `mats` is constant."""
    wv = val(w)
    mv = np.asarray(mats)
    out = np.einsum("bkh,bkhij->bhij", wv, mv, optimize=True)

    def vjp(g):
        return [np.einsum("bhij,bkhij->bkh", g, mv, optimize=True)]

    return _op(out, (w,), vjp)


def matvec(q, s):
    """Row-vector state contraction: q[b,h,:] @ s[b,h,:,:] -> (B, H, d)."""
    qv, sv = val(q), val(s)
    out = np.einsum("bhi,bhij->bhj", qv, sv, optimize=True)

    def vjp(g):
        grads = []
        if isinstance(q, Node):
            grads.append(np.einsum("bhj,bhij->bhi", g, sv, optimize=True))
        if isinstance(s, Node):
            grads.append(np.einsum("bhi,bhj->bhij", qv, g, optimize=True))
        return grads

    return _op(out, (q, s), vjp)


def project_heads(x, w):
    """x[..., d] @ w[h, d, e] -> (..., H, e)."""
    xv, wv = val(x), val(w)
    out = np.einsum("...d,hde->...he", xv, wv, optimize=True)

    def vjp(g):
        grads = []
        if isinstance(x, Node):
            grads.append(np.einsum("...he,hde->...d", g, wv, optimize=True))
        if isinstance(w, Node):
            grads.append(np.einsum("...d,...he->hde", xv, g, optimize=True))
        return grads

    return _op(out, (x, w), vjp)


# ---------------------------------------------------------------------------
# backward


class GradientSet:
    """Adjoints keyed by leaf Node; missing leaves read as zero."""

    def __init__(self, table):
        self._table = table

    def of(self, node):
        g = self._table.get(node)
        if g is None:
            return np.zeros_like(node.value)
        return g


def backward(tape, root):
    """Reverse-sweep the tape from scalar `root`; returns a GradientSet."""
    if tape.consumed:
        raise RuntimeError("tape already consumed")
    tape.consumed = True
    if not isinstance(root, Node):
        raise TypeError("backward root must be a Node")
    table = {root: np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = table.pop(node, None)
        if g is not None:
            for parent, pg in zip(node.parents, node.vjp(g)):
                acc = table.get(parent)
                table[parent] = pg if acc is None else acc + pg
        # release closures and drop the node->tape->nodes reference cycle
        node.vjp = None
        node.parents = ()
    tape.nodes.clear()
    return GradientSet(table)
