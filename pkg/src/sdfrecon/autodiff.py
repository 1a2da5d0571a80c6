"""Reverse-mode automatic differentiation over dense float arrays.

A ``Tape`` records op nodes in creation order, which is already a valid
topological order for a define-by-run graph. Backward rules are expressed
in terms of the same ops, so running ``backward`` with ``create_graph=True``
records the gradient computation itself and makes it differentiable again
(needed for input gradients of the SDF that feed back into the loss).

The op set is intentionally closed and small; anything outside it raises.
Data defaults to float64; ``set_default_dtype(np.float32)`` switches every
subsequently created Value (training uses this for speed, the test oracles
keep float64).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Value", "Tape", "constant", "leaf", "backward", "grad", "no_grad",
    "add", "sub", "neg", "mul", "div", "matmul", "exp", "log", "log1p",
    "sqrt", "sin", "cos", "sigmoid", "softplus", "absval", "clamp",
    "where", "vsum", "vmean", "cumsum", "flip", "concat", "narrow",
    "embed", "reshape", "transpose", "l2norm", "set_default_dtype",
    "default_dtype",
]

_ACTIVE_TAPE = None
_DTYPE = np.float64


def set_default_dtype(dtype):
    """Dtype for all Values created afterwards (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


class Tape:
    """Recording context. Node list doubles as the topological order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False


class no_grad:
    """Suspends recording; ops executed inside produce plain constants."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False


class Value:
    """One node: data plus (when recorded) parents and their vjp closures."""

    __slots__ = ("data", "grad", "parents", "vjps", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.parents = ()
        self.vjps = ()
        self.requires_grad = requires_grad
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def tracked(self):
        return self.requires_grad or bool(self.parents)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, tracked={self.tracked})"

    # operator sugar; non-Values are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(data):
    return Value(data)


def leaf(data, requires_grad=True):
    """A graph leaf (parameter or differentiated input)."""
    return Value(data, requires_grad=requires_grad)


def _wrap(x):
    return x if isinstance(x, Value) else Value(x)


def _node(data, pairs):
    """Create an op node; records parents only under an active tape."""
    out = Value(data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        tracked = [(p, f) for p, f in pairs if p.tracked]
        if tracked:
            out.parents = tuple(p for p, _ in tracked)
            out.vjps = tuple(f for _, f in tracked)
            out._tape = tape
            tape.nodes.append(out)
    return out


def _check_elementwise(a, b, op):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ValueError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def _unbroadcast(g, shape):
    """Reduce cotangent g back to `shape` after implicit broadcasting."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = vsum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, ts) in enumerate(zip(g.data.shape, shape)) if ts == 1 and gs != 1
    )
    if axes:
        g = vsum(g, axis=axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "add")
    return _node(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "sub")
    return _node(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(neg(g), b.data.shape)),
    ])


def neg(a):
    return _node(-a.data, [(a, lambda g: neg(g))])


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "mul")
    return _node(a.data * b.data, [
        (a, lambda g: _unbroadcast(mul(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), b.data.shape)),
    ])


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_elementwise(a, b, "div")
    return _node(a.data / b.data, [
        (a, lambda g: _unbroadcast(div(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.data.shape)),
    ])


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: expects 2-d operands with matching inner dim, "
            f"got {a.data.shape} @ {b.data.shape}"
        )
    return _node(a.data @ b.data, [
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ])


# ------------------------------------------------------------- elementwise

def exp(a):
    out = _node(np.exp(a.data), [(a, None)])
    if out.vjps:
        out.vjps = (lambda g: mul(g, out),)
    return out


def log(a):
    return _node(np.log(a.data), [(a, lambda g: div(g, a))])


def log1p(a):
    return _node(np.log1p(a.data), [(a, lambda g: div(g, add(a, Value(1.0))))])


def sqrt(a):
    out = _node(np.sqrt(a.data), [(a, None)])
    if out.vjps:
        out.vjps = (lambda g: div(g, mul(Value(2.0), out)),)
    return out


def sin(a):
    return _node(np.sin(a.data), [(a, lambda g: mul(g, cos(a)))])


def cos(a):
    return _node(np.cos(a.data), [(a, lambda g: neg(mul(g, sin(a))))])


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out = _node(_sigmoid_np(a.data), [(a, None)])
    if out.vjps:
        out.vjps = (lambda g: mul(g, mul(out, sub(Value(1.0), out))),)
    return out


def _softplus_np(x, beta):
    bx = beta * x
    return (np.maximum(bx, 0.0) + np.log1p(np.exp(-np.abs(bx)))) / beta


def softplus(a, beta=1.0):
    """softplus(x) = log(1 + exp(beta x)) / beta, overflow-safe."""
    b = float(beta)
    return _node(_softplus_np(a.data, b), [
        (a, lambda g: mul(g, sigmoid(mul(Value(b), a)))),
    ])


def absval(a):
    # sign treated as constant: correct almost everywhere, sign(0) -> 0
    return _node(np.abs(a.data), [(a, lambda g: mul(g, Value(np.sign(a.data))))])


def clamp(a, lo=None, hi=None):
    data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data)
    if lo is not None:
        inside = inside * (a.data >= lo)
    if hi is not None:
        inside = inside * (a.data <= hi)
    return _node(data, [(a, lambda g: mul(g, Value(inside)))])


def where(cond, a, b):
    """Select-by-mask; `cond` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _wrap(a), _wrap(b)
    data = np.where(cond, a.data, b.data)
    zero = Value(0.0)
    return _node(data, [
        (a, lambda g: _unbroadcast(where(cond, g, zero), a.data.shape)),
        (b, lambda g: _unbroadcast(where(cond, zero, g), b.data.shape)),
    ])


# -------------------------------------------------------------- reductions

def vsum(a, axis=None, keepdims=False):
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        gd = g
        if not keepdims and axis is not None:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            shp = list(a.data.shape)
            for i in sorted(a_ % a.data.ndim for a_ in ax):
                shp[i] = 1
            gd = reshape(gd, tuple(shp))
        elif not keepdims and axis is None:
            gd = reshape(gd, (1,) * a.data.ndim)
        return mul(gd, Value(np.ones_like(a.data)))

    return _node(data, [(a, vjp)])


def vmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[i] for i in np.atleast_1d(axis)]
    )
    return mul(vsum(a, axis=axis, keepdims=keepdims), Value(1.0 / float(n)))


def cumsum(a, axis):
    def vjp(g):
        return flip(cumsum(flip(g, axis), axis), axis)

    return _node(np.cumsum(a.data, axis=axis), [(a, vjp)])


def flip(a, axis):
    return _node(np.flip(a.data, axis=axis), [(a, lambda g: flip(g, axis))])


# ------------------------------------------------------------ shape/layout

def concat(vals, axis):
    vals = [_wrap(v) for v in vals]
    data = np.concatenate([v.data for v in vals], axis=axis)
    pairs = []
    start = 0
    for v in vals:
        length = v.data.shape[axis]
        pairs.append((v, lambda g, s=start, n=length: narrow(g, axis, s, n)))
        start += length
    return _node(data, pairs)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    total = a.data.shape[axis]
    return _node(
        a.data[idx],
        [(a, lambda g: embed(g, axis, start, total))],
    )


def embed(a, axis, start, total):
    """Place `a` into a zero array of size `total` along `axis` (vjp of narrow)."""
    shp = list(a.data.shape)
    shp[axis] = total
    data = np.zeros(shp, dtype=a.data.dtype)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + a.data.shape[axis])
    data[tuple(idx)] = a.data
    length = a.data.shape[axis]
    return _node(data, [(a, lambda g: narrow(g, axis, start, length))])


def reshape(a, shape):
    old = a.data.shape
    return _node(a.data.reshape(shape), [(a, lambda g: reshape(g, old))])


def transpose(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expects 2-d, got {a.data.shape}")
    return _node(a.data.T.copy(), [(a, lambda g: transpose(g))])


# ---------------------------------------------------------------- helpers

def l2norm(a, axis=-1, keepdims=False, eps=0.0):
    s = vsum(mul(a, a), axis=axis, keepdims=keepdims)
    if eps:
        s = add(s, Value(eps))
    return sqrt(s)


# --------------------------------------------------------------- backward

def _accumulate(root, seed, create_graph, keep_ids=frozenset()):
    tape = root._tape
    cot = {id(root): seed}
    if tape is None:
        return cot
    nodes = tape.nodes
    stop = len(nodes)

    def run(fn, g):
        if create_graph:
            return fn(g)
        with no_grad():
            return fn(g)

    for i in range(stop - 1, -1, -1):
        node = nodes[i]
        nid = id(node)
        g = cot.get(nid)
        if g is None or not node.vjps:
            continue
        for p, f in zip(node.parents, node.vjps):
            contrib = run(f, g)
            prev = cot.get(id(p))
            if prev is None:
                cot[id(p)] = contrib
            else:
                cot[id(p)] = run(lambda x: add(prev, x), contrib)
        if nid not in keep_ids:
            del cot[nid]  # free the cotangent as soon as it is consumed
    return cot


def backward(root):
    """Backprop from a scalar root; fills `.grad` on tracked leaves.

    Returns a dict mapping leaf Value -> gradient ndarray for every leaf
    reached by the sweep.
    """
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.data.shape}")
    seed = Value(np.ones_like(root.data))
    with no_grad():
        cot = _accumulate(root, seed, create_graph=False)
    out = {}
    stack = [root]
    seen = set()
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.requires_grad:
            g = cot.get(id(n))
            arr = g.data if g is not None else np.zeros_like(n.data)
            if arr.shape != n.data.shape:
                arr = np.broadcast_to(arr, n.data.shape).copy()
            n.grad = arr if n.grad is None else n.grad + arr
            out[n] = n.grad
        stack.extend(n.parents)
    return out


def grad(root, wrt, create_graph=False):
    """Gradients of a scalar root w.r.t. the Values in `wrt`.

    With ``create_graph=True`` the returned Values are themselves recorded
    on the tape and can be differentiated again. Unreached entries come
    back as zeros.
    """
    if root.data.size != 1:
        raise ValueError(f"grad: root must be scalar, got shape {root.data.shape}")
    single = isinstance(wrt, Value)
    targets = [wrt] if single else list(wrt)
    keep = frozenset(id(t) for t in targets)
    seed = Value(np.ones_like(root.data))
    if create_graph:
        cot = _accumulate(root, seed, create_graph=True, keep_ids=keep)
    else:
        with no_grad():
            cot = _accumulate(root, seed, create_graph=False, keep_ids=keep)
    outs = []
    for t in targets:
        g = cot.get(id(t))
        if g is None:
            g = Value(np.zeros_like(t.data))
        elif g.data.shape != t.data.shape:
            g = _unbroadcast(g, t.data.shape)
        outs.append(g)
    return outs[0] if single else outs
