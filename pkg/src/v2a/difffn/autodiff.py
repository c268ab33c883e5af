"""Reverse-mode automatic differentiation over numpy arrays.

A Tape records operations in creation order (which is already topological),
and the backward pass replays the closures in reverse. Variables wrap float64
arrays; plain ndarrays and Python scalars act as constants. The op set is the
minimum needed by the learned components in this repository: affine layers,
pointwise nonlinearities, reductions, concatenation, gather/select, and
logsumexp. No broadcasting beyond bias rows and scalars.
"""

from __future__ import annotations

import numpy as np

from ..errors import NumericError


class Tape:
    __slots__ = ("ops",)

    def __init__(self):
        self.ops: list = []


class Var:
    """Array-valued node on a tape. `v` is the value, `g` the accumulated gradient."""

    __slots__ = ("v", "g", "tape")

    def __init__(self, value, tape: Tape):
        self.v = value
        self.g = None
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.v)

    # Operator sugar for the common cases; constants may sit on either side.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_var(x) -> bool:
    return type(x) is Var


def _val(x):
    return x.v if type(x) is Var else x


def _tape_of(*xs) -> Tape:
    for x in xs:
        if type(x) is Var:
            return x.tape
    raise NumericError("operation has no tape-bound operand")


def _accum(x: Var, grad):
    # Producers hand over freshly computed arrays, so the reference is safe to keep.
    if x.g is None:
        x.g = grad
    else:
        x.g = x.g + grad


def leaf(value, tape: Tape) -> Var:
    return Var(np.asarray(value, dtype=np.float64), tape)


def backward(root: Var):
    """Run the reverse pass, seeding the root (a scalar) with gradient 1."""
    if np.ndim(root.v) != 0 and np.size(root.v) != 1:
        raise NumericError("backward root must be scalar")
    root.g = np.float64(1.0)
    for fn in reversed(root.tape.ops):
        fn()


def _unary(x, fwd, bwd):
    t = _tape_of(x)
    out = Var(fwd(_val(x)), t)

    def back():
        if out.g is not None and _is_var(x):
            _accum(x, bwd(out.g, _val(x), out.v))

    t.ops.append(back)
    return out


def add(a, b):
    t = _tape_of(a, b)
    out = Var(_val(a) + _val(b), t)

    def back():
        if out.g is None:
            return
        g = out.g
        if _is_var(a):
            _accum(a, g if np.shape(_val(a)) == np.shape(g) else _reduce_to(g, np.shape(_val(a))))
        if _is_var(b):
            _accum(b, g if np.shape(_val(b)) == np.shape(g) else _reduce_to(g, np.shape(_val(b))))

    t.ops.append(back)
    return out


def _reduce_to(g, shape):
    # bias rows (n,) against (B, n), and scalars against anything
    if shape == ():
        return np.sum(g)
    return np.sum(g, axis=0)


def sub(a, b):
    t = _tape_of(a, b)
    out = Var(_val(a) - _val(b), t)

    def back():
        if out.g is None:
            return
        g = out.g
        if _is_var(a):
            _accum(a, g if np.shape(_val(a)) == np.shape(g) else _reduce_to(g, np.shape(_val(a))))
        if _is_var(b):
            gb = -g
            _accum(b, gb if np.shape(_val(b)) == np.shape(gb) else _reduce_to(gb, np.shape(_val(b))))

    t.ops.append(back)
    return out


def mul(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = Var(av * bv, t)

    def back():
        if out.g is None:
            return
        g = out.g
        if _is_var(a):
            ga = g * bv
            _accum(a, ga if np.shape(av) == np.shape(ga) else _reduce_to(ga, np.shape(av)))
        if _is_var(b):
            gb = g * av
            _accum(b, gb if np.shape(bv) == np.shape(gb) else _reduce_to(gb, np.shape(bv)))

    t.ops.append(back)
    return out


def matmul(a, b):
    t = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    out = Var(av @ bv, t)

    def back():
        if out.g is None:
            return
        g = out.g
        if _is_var(a):
            _accum(a, g @ bv.T)
        if _is_var(b):
            _accum(b, av.T @ g)

    t.ops.append(back)
    return out


def affine(x, w, b):
    """x @ w + b with the bias row broadcast over the batch."""
    t = _tape_of(x, w, b)
    xv, wv, bv = _val(x), _val(w), _val(b)
    out = Var(xv @ wv + bv, t)

    def back():
        if out.g is None:
            return
        g = out.g
        if _is_var(x):
            _accum(x, g @ wv.T)
        if _is_var(w):
            _accum(w, xv.T @ g)
        if _is_var(b):
            _accum(b, np.sum(g, axis=0) if g.ndim > bv.ndim else g)

    t.ops.append(back)
    return out


def affine_relu(x, w, b):
    """Fused x @ w + b followed by the rectifier."""
    t = _tape_of(x, w, b)
    xv, wv, bv = _val(x), _val(w), _val(b)
    pre = xv @ wv + bv
    out = Var(np.maximum(pre, 0.0), t)
    mask = pre > 0.0

    def back():
        if out.g is None:
            return
        g = out.g * mask
        if _is_var(x):
            _accum(x, g @ wv.T)
        if _is_var(w):
            _accum(w, xv.T @ g)
        if _is_var(b):
            _accum(b, np.sum(g, axis=0) if g.ndim > bv.ndim else g)

    t.ops.append(back)
    return out


def weighted_mse(pred, target, weights=None, scale=1.0):
    """scale * mean(weights * (pred - target)^2) over 1-D rows.

    Only `pred` is differentiable; targets and weights are constants.
    """
    t = _tape_of(pred)
    pv = _val(pred)
    if pv.ndim != 1:
        raise NumericError("weighted_mse expects 1-D predictions")
    resid = pv - target
    wr = resid if weights is None else weights * resid
    n = pv.shape[0]
    out = Var(np.float64(scale * np.sum(wr * resid) / n), t)

    def back():
        if out.g is None:
            return
        _accum(pred, (out.g * 2.0 * scale / n) * wr)

    t.ops.append(back)
    return out


def l2_normalize_rows(x, eps=1e-12):
    """Rows scaled to unit Euclidean norm."""
    t = _tape_of(x)
    xv = _val(x)
    norms = np.sqrt(np.sum(xv * xv, axis=1, keepdims=True)) + eps
    out = Var(xv / norms, t)

    def back():
        if out.g is None:
            return
        g = out.g
        dot = np.sum(g * xv, axis=1, keepdims=True)
        _accum(x, g / norms - xv * (dot / norms**3))

    t.ops.append(back)
    return out


def transpose(x):
    t = _tape_of(x)
    out = Var(_val(x).T, t)

    def back():
        if out.g is None:
            return
        _accum(x, out.g.T)

    t.ops.append(back)
    return out


def reshape(x, shape):
    t = _tape_of(x)
    xv = _val(x)
    out = Var(np.reshape(xv, shape), t)

    def back():
        if out.g is None:
            return
        _accum(x, np.reshape(out.g, xv.shape))

    t.ops.append(back)
    return out


def relu(x):
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0.0))


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def sigmoid(x):
    return _unary(
        x,
        lambda v: 1.0 / (1.0 + np.exp(-v)),
        lambda g, v, o: g * o * (1.0 - o),
    )


def exp(x):
    return _unary(x, np.exp, lambda g, v, o: g * o)


def log(x):
    return _unary(x, np.log, lambda g, v, o: g / v)


def square(x):
    return _unary(x, np.square, lambda g, v, o: g * 2.0 * v)


def clip(x, lo, hi):
    """Hard clamp; gradient passes only through the interior."""
    return _unary(
        x,
        lambda v: np.clip(v, lo, hi),
        lambda g, v, o: g * ((v >= lo) & (v <= hi)),
    )


def vsum(x, axis=None):
    t = _tape_of(x)
    xv = _val(x)
    out = Var(np.sum(xv, axis=axis), t)

    def back():
        if out.g is None:
            return
        g = out.g
        if axis is None:
            _accum(x, np.broadcast_to(g, xv.shape).astype(np.float64))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), xv.shape).astype(np.float64))

    t.ops.append(back)
    return out


def vmean(x, axis=None):
    xv = _val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(vsum(x, axis=axis), 1.0 / n)


def concat(parts, axis=1):
    t = _tape_of(*parts)
    vals = [_val(p) for p in parts]
    out = Var(np.concatenate(vals, axis=axis), t)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back():
        if out.g is None:
            return
        pieces = np.split(out.g, splits, axis=axis)
        for p, piece in zip(parts, pieces):
            if _is_var(p):
                _accum(p, piece)

    t.ops.append(back)
    return out


def narrow(x, start, length, axis=1):
    """Contiguous slice along an axis."""
    t = _tape_of(x)
    xv = _val(x)
    idx = [slice(None)] * xv.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Var(xv[idx], t)

    def back():
        if out.g is None:
            return
        g = np.zeros_like(xv)
        g[idx] = out.g
        _accum(x, g)

    t.ops.append(back)
    return out


def segment(flat: Var, offset: int, length: int, shape=None):
    """View into a flat parameter leaf, optionally reshaped.

    Gradients are accumulated in place into the leaf's flat gradient buffer,
    which only segment ops touch.
    """
    t = flat.tape
    view = flat.v[offset : offset + length]
    out = Var(view.reshape(shape) if shape is not None else view, t)

    def back():
        if out.g is None:
            return
        if flat.g is None:
            flat.g = np.zeros_like(flat.v)
        flat.g[offset : offset + length] += np.reshape(out.g, length)

    t.ops.append(back)
    return out


def gather_rows(x, idx):
    t = _tape_of(x)
    xv = _val(x)
    out = Var(xv[idx], t)

    def back():
        if out.g is None:
            return
        g = np.zeros_like(xv)
        np.add.at(g, idx, out.g)
        _accum(x, g)

    t.ops.append(back)
    return out


def select_columns(x, col_idx):
    """out[i] = x[i, col_idx[i]]; used for categorical log-probabilities."""
    t = _tape_of(x)
    xv = _val(x)
    rows = np.arange(xv.shape[0])
    out = Var(xv[rows, col_idx], t)

    def back():
        if out.g is None:
            return
        g = np.zeros_like(xv)
        g[rows, col_idx] = out.g
        _accum(x, g)

    t.ops.append(back)
    return out


def logsumexp(x, axis=1):
    t = _tape_of(x)
    xv = _val(x)
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp(xv - m)
    s = np.sum(e, axis=axis)
    out = Var(np.log(s) + np.squeeze(m, axis=axis), t)
    soft = e / s[..., None] if axis in (1, -1) else e / np.expand_dims(s, axis)

    def back():
        if out.g is None:
            return
        _accum(x, np.expand_dims(out.g, axis) * soft)

    t.ops.append(back)
    return out


def value(x) -> np.ndarray:
    """Detach: constant view of a node's value."""
    return _val(x)
