"""Minimal reverse-mode autodiff over dense numpy arrays.

A Tensor wraps a numpy array plus the bookkeeping needed for backprop:
parents, an op tag, and a backward closure. Values are immutable after
creation; gradients accumulate until explicitly cleared. Precision is a
process-global switch (float64 for verification, float32 for speed runs).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64


def set_default_dtype(name):
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype():
    return _default_dtype


class ShapeError(ValueError):
    pass


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, value, parents=(), op="leaf", requires_grad=False):
        self.value = np.asarray(value, dtype=_default_dtype)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.value)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def backward(self):
        """Accumulate d(self)/d(param) into .grad of every reachable node.

        self must be scalar-shaped. Repeated calls accumulate; callers
        zero grads explicitly (the trainer does this each step).
        """
        if self.value.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accum(np.ones_like(self.value))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def constant(value):
    return Tensor(value)


def parameter(value):
    return Tensor(value, requires_grad=True)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(x, op):
    if not np.all(np.isfinite(x.value)):
        raise ValueError(f"{op}: non-finite input")


# -- elementwise arithmetic -----------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value + b.value, (a, b), "add")

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    out._backward = bw
    return out


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value - b.value, (a, b), "sub")

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    out._backward = bw
    return out


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value * b.value, (a, b), "mul")

    def bw(g):
        a._accum(_unbroadcast(g * b.value, a.shape))
        b._accum(_unbroadcast(g * a.value, b.shape))

    out._backward = bw
    return out


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value / b.value, (a, b), "div")

    def bw(g):
        a._accum(_unbroadcast(g / b.value, a.shape))
        b._accum(_unbroadcast(-g * a.value / (b.value * b.value), b.shape))

    out._backward = bw
    return out


def square(a):
    a = _wrap(a)
    out = Tensor(a.value * a.value, (a,), "square")

    def bw(g):
        a._accum(2.0 * a.value * g)

    out._backward = bw
    return out


def sqrt(a):
    a = _wrap(a)
    out = Tensor(np.sqrt(a.value), (a,), "sqrt")

    def bw(g):
        a._accum(g * 0.5 / out.value)

    out._backward = bw
    return out


def exp(a):
    a = _wrap(a)
    out = Tensor(np.exp(a.value), (a,), "exp")

    def bw(g):
        a._accum(g * out.value)

    out._backward = bw
    return out


def log(a):
    a = _wrap(a)
    _check_finite(a, "log")
    out = Tensor(np.log(a.value), (a,), "log")

    def bw(g):
        a._accum(g / a.value)

    out._backward = bw
    return out


def sin(a):
    a = _wrap(a)
    out = Tensor(np.sin(a.value), (a,), "sin")

    def bw(g):
        a._accum(g * np.cos(a.value))

    out._backward = bw
    return out


def sigmoid(a):
    a = _wrap(a)
    v = np.empty_like(a.value)
    pos = a.value >= 0
    v[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ev = np.exp(a.value[~pos])
    v[~pos] = ev / (1.0 + ev)
    out = Tensor(v, (a,), "sigmoid")

    def bw(g):
        a._accum(g * v * (1.0 - v))

    out._backward = bw
    return out


def tanh(a):
    a = _wrap(a)
    out = Tensor(np.tanh(a.value), (a,), "tanh")

    def bw(g):
        a._accum(g * (1.0 - out.value * out.value))

    out._backward = bw
    return out


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact (erf-based) GELU."""
    a = _wrap(a)
    cdf = 0.5 * (1.0 + erf(a.value * _INV_SQRT2))
    out = Tensor(a.value * cdf, (a,), "gelu")

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.value * a.value)
        a._accum(g * (cdf + a.value * pdf))

    out._backward = bw
    return out


# -- shape manipulation ----------------------------------------------------

def reshape(a, shape):
    a = _wrap(a)
    out = Tensor(a.value.reshape(shape), (a,), "reshape")

    def bw(g):
        a._accum(g.reshape(a.shape))

    out._backward = bw
    return out


def transpose(a, axes=None):
    a = _wrap(a)
    out = Tensor(np.transpose(a.value, axes), (a,), "transpose")
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(g):
        a._accum(np.transpose(g, inv))

    out._backward = bw
    return out


def tslice(a, key):
    a = _wrap(a)
    out = Tensor(a.value[key], (a,), "slice")

    def bw(g):
        ga = np.zeros_like(a.value)
        np.add.at(ga, key, g)
        a._accum(ga)

    out._backward = bw
    return out


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    out._backward = bw
    return out


def masked_select_rows(a, mask):
    """Select rows of a 2-D tensor where mask (bool, length T) is true."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[0] != a.shape[0]:
        raise ShapeError(f"masked_select_rows: mask length {mask.shape[0]} vs rows {a.shape[0]}")
    idx = np.nonzero(mask)[0]
    out = Tensor(a.value[idx], (a,), "masked_select")

    def bw(g):
        ga = np.zeros_like(a.value)
        ga[idx] = g
        a._accum(ga)

    out._backward = bw
    return out


def index_select_last(a, idx):
    """Gather along the last axis with an integer index array.

    Output shape is a.shape[:-1] + idx.shape; backward scatter-adds.
    """
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.value[..., idx], (a,), "gather")

    def bw(g):
        ga = np.zeros_like(a.value)
        flat_idx = idx.ravel()
        gflat = g.reshape(a.shape[:-1] + (flat_idx.size,))
        np.add.at(ga.reshape(a.shape), (..., flat_idx), gflat)
        a._accum(ga)

    out._backward = bw
    return out


# -- reductions ------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum")

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    out._backward = bw
    return out


def tmean(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = Tensor(a.value.mean(axis=axis, keepdims=keepdims), (a,), "mean")
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape) / n)

    out._backward = bw
    return out


# -- matmul and softmax ----------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value, (a, b), "matmul")

    def bw(g):
        a._accum(g @ b.value.T)
        b._accum(a.value.T @ g)

    out._backward = bw
    return out


def softmax(a, axis=-1):
    a = _wrap(a)
    v = a.value - a.value.max(axis=axis, keepdims=True)
    ev = np.exp(v)
    s = ev / ev.sum(axis=axis, keepdims=True)
    out = Tensor(s, (a,), "softmax")

    def bw(g):
        a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    out._backward = bw
    return out


def log_softmax(a, axis=-1):
    a = _wrap(a)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = a.value - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse, (a,), "log_softmax")

    def bw(g):
        s = np.exp(out.value)
        a._accum(g - s * g.sum(axis=axis, keepdims=True))

    out._backward = bw
    return out


# -- convolution -----------------------------------------------------------

def conv1d(x, w, bias=None, stride=1, dilation=1, pad=0, groups=1):
    """1-D convolution over (C_in, T) with weight (C_out, C_in // groups, K).

    Zero padding; output length (T + 2*pad - dilation*(K-1) - 1)//stride + 1.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeError(f"conv1d expects x (C,T) and w (Co,Ci,K), got {x.shape}, {w.shape}")
    c_in, t = x.shape
    c_out, c_in_g, k = w.shape
    if c_in_g * groups != c_in or c_out % groups != 0:
        raise ShapeError(
            f"conv1d: channel mismatch x={x.shape} w={w.shape} groups={groups}")
    t_out = (t + 2 * pad - dilation * (k - 1) - 1) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input too short (T={t}, K={k}, dilation={dilation}, pad={pad})")

    xp = np.pad(x.value, ((0, 0), (pad, pad))) if pad else x.value
    # cols[c, j, t] = xp[c, j*dilation + t*stride]
    cols = np.empty((c_in, k, t_out), dtype=x.value.dtype)
    for j in range(k):
        start = j * dilation
        cols[:, j, :] = xp[:, start:start + stride * t_out:stride][:, :t_out]

    co_g = c_out // groups
    out_v = np.empty((c_out, t_out), dtype=x.value.dtype)
    for gi in range(groups):
        wg = w.value[gi * co_g:(gi + 1) * co_g]            # (co_g, c_in_g, k)
        cg = cols[gi * c_in_g:(gi + 1) * c_in_g]           # (c_in_g, k, t_out)
        out_v[gi * co_g:(gi + 1) * co_g] = np.tensordot(wg, cg, axes=([1, 2], [0, 1]))

    parents = (x, w) if bias is None else (x, w, _wrap(bias))
    out = Tensor(out_v if bias is None else out_v + parents[2].value[:, None], parents, "conv1d")

    def bw(g):
        gw = np.zeros_like(w.value)
        gcols = np.zeros_like(cols)
        for gi in range(groups):
            go = g[gi * co_g:(gi + 1) * co_g]              # (co_g, t_out)
            cg = cols[gi * c_in_g:(gi + 1) * c_in_g]
            gw[gi * co_g:(gi + 1) * co_g] = np.tensordot(go, cg, axes=([1], [2]))
            gcols[gi * c_in_g:(gi + 1) * c_in_g] = np.tensordot(
                w.value[gi * co_g:(gi + 1) * co_g], go, axes=([0], [0]))
        gxp = np.zeros((c_in, t + 2 * pad), dtype=x.value.dtype)
        for j in range(k):
            start = j * dilation
            gxp[:, start:start + stride * t_out:stride] += gcols[:, j, :]
        x._accum(gxp[:, pad:pad + t] if pad else gxp)
        w._accum(gw)
        if bias is not None:
            parents[2]._accum(g.sum(axis=1))

    out._backward = bw
    return out


def glu(a, axis=-1):
    """Gated linear unit: split in half along axis, first * sigmoid(second)."""
    a = _wrap(a)
    n = a.shape[axis]
    if n % 2 != 0:
        raise ShapeError(f"glu: axis size {n} not even")
    half = n // 2
    sl_a = [slice(None)] * a.ndim
    sl_b = [slice(None)] * a.ndim
    sl_a[axis] = slice(0, half)
    sl_b[axis] = slice(half, n)
    return mul(tslice(a, tuple(sl_a)), sigmoid(tslice(a, tuple(sl_b))))


def softplus(a):
    a = _wrap(a)
    v = np.logaddexp(0.0, a.value)
    out = Tensor(v, (a,), "softplus")

    def bw(g):
        s = np.empty_like(a.value)
        pos = a.value >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
        ev = np.exp(a.value[~pos])
        s[~pos] = ev / (1.0 + ev)
        a._accum(g * s)

    out._backward = bw
    return out


def layer_norm(x, gamma, beta, axis=-1, eps=1e-5):
    """Normalize along axis, then scale/shift. Composed from primitives."""
    mu = tmean(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = tmean(square(xc), axis=axis, keepdims=True)
    xn = div(xc, sqrt(add(var, eps)))
    return add(mul(xn, gamma), beta)


# -- op dispatch table -----------------------------------------------------

_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "conv1d": conv1d,
    "transpose": transpose,
    "reshape": reshape,
    "slice": tslice,
    "concat": concat,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "exp": exp,
    "log": log,
    "sin": sin,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "glu": glu,
    "layer_norm": layer_norm,
    "mean": tmean,
    "sum": tsum,
    "masked_select": masked_select_rows,
    "square": square,
    "sqrt": sqrt,
    "softplus": softplus,
    "gather": index_select_last,
}


def forward_op(op, inputs, **kwargs):
    """Dispatch an op by name. `inputs` is a list of Tensors / arrays."""
    if op not in _OPS:
        raise ValueError(f"unsupported op {op!r}")
    fn = _OPS[op]
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


class ParamStore:
    """Named trainable parameters with deterministic iteration order."""

    def __init__(self, rng_seed=0):
        self.rng_seed = rng_seed
        self._params = {}

    def add(self, name, value, requires_grad=True):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=_default_dtype), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def state_arrays(self):
        """Name -> value copy, for EMA snapshots and checkpoints."""
        return {k: v.value.copy() for k, v in self._params.items()}

    def load_arrays(self, arrays):
        for k, v in arrays.items():
            p = self._params[k]
            if p.value.shape != v.shape:
                raise ShapeError(f"param {k!r}: shape {v.shape} vs expected {p.value.shape}")
            p.value = np.asarray(v, dtype=_default_dtype).copy()
