"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the operations the anticipation network needs are provided. Every op
computes its forward value with numpy and, when any input requires a
gradient, records a backward rule on the output. ``Tensor.backward`` walks
the recorded graph in reverse topological order, visiting each op once.

Two thread-local switches control evaluation:

* ``no_grad()`` stops recording.
* ``row_invariant()`` routes matrix products through a non-BLAS kernel
  whose per-row result does not depend on how many rows are computed
  together. Streaming inference relies on it to match batch inference
  bit for bit.
"""

from __future__ import annotations

import contextlib
import json
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DimensionError, DomainError, NonFiniteError, TrainingError

_state = threading.local()


def _flag(name):
    return getattr(_state, name, name == "grad")


@contextlib.contextmanager
def no_grad():
    prev = _flag("grad")
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def row_invariant():
    prev = _flag("row_invariant")
    _state.row_invariant = True
    try:
        yield
    finally:
        _state.row_invariant = prev


def grad_enabled():
    return _flag("grad")


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = data if data.flags.c_contiguous else data.copy()
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.shape}")
        grads = {id(self): grad}
        for node in reversed(tape(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def tape(root):
    """Recorded ops reachable from ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data, op):
    # a finite sum implies finite entries; only fall back to the full scan otherwise
    if not np.isfinite(np.sum(data)) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")


def _make(data, parents, backward, op):
    _check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _mm(a, b):
    if _flag("row_invariant"):
        return np.einsum("...ij,...jk->...ik", a, b, optimize=False)
    return np.matmul(a, b)


# elementwise binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    x = a.data
    if p != int(p) and np.any(x < 0):
        raise DomainError("fractional power of a negative value")
    return _make(x ** p, (a,), lambda g: (g * p * x ** (p - 1),), "power")


def minimum(a, c):
    """Elementwise ``min(a, c)`` against a constant; gradient 1 where ``a <= c``."""
    a = as_tensor(a)
    c = np.asarray(c, dtype=np.float64)
    keep = a.data <= c
    return _make(np.where(keep, a.data, c), (a,), lambda g: (g * keep,), "minimum")


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * cond, sa), _unbroadcast(g * ~cond, sb)), "where")


# unary ops


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (np.where(out > 0, g, 0.0),), "relu")


def softplus(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.logaddexp(0.0, x), (a,), lambda g: (g * expit(x),), "softplus")


def tabs(a):
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (np.array(_expand(g, shape, axes, keepdims)),), "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1
    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,),
                 lambda g: (_expand(g, shape, axes, keepdims) / count,), "mean")


def tmax(a, axis=None, keepdims=False):
    """Max pooling over ``axis``; the gradient is shared equally among tied maxima."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    x = a.data
    m = x.max(axis=axes, keepdims=True)
    hit = x == m
    share = hit / hit.sum(axis=axes, keepdims=True)
    out = m if keepdims else m.squeeze(axis=axes)
    return _make(out, (a,), lambda g: (_expand(g, x.shape, axes, keepdims) * share,), "max")


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    x = a.data
    m = x.max(axis=axes, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axes, keepdims=True)
    out = np.log(s) + m
    soft = e / s
    res = out if keepdims else out.squeeze(axis=axes)
    return _make(res, (a,), lambda g: (_expand(g, x.shape, axes, keepdims) * soft,), "logsumexp")


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward, "softmax")


# structural ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward, "stack")


# linear algebra


def matmul(a, b):
    """Matrix product over the last two axes, with leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(_mm(ad, bd), (a, b), backward, "matmul")


def _conv_shifts(K, dilation):
    # tap j reads the input (K-1-j)*dilation frames in the past
    return [(K - 1 - j) * dilation for j in range(K)]


def _im2col(x, K, dilation):
    T = x.shape[0]
    cols = np.zeros(x.shape[:-1] + (K * x.shape[-1],))
    cin = x.shape[-1]
    for j, s in enumerate(_conv_shifts(K, dilation)):
        if s < T:
            cols[s:, ..., j * cin:(j + 1) * cin] = x[: T - s]
    return cols


def _check_conv(x, kernel, dilation):
    if kernel.ndim != 3:
        raise DimensionError(f"conv kernel must be K x Cin x Cout, got {kernel.shape}")
    if kernel.shape[0] < 1:
        raise ConfigError("kernel width must be >= 1", "K")
    if int(dilation) != dilation or dilation < 1:
        raise ConfigError(f"dilation must be an integer >= 1, got {dilation}", "dilation")
    if x.shape[-1] != kernel.shape[1]:
        raise DimensionError(f"conv input channels {x.shape[-1]} != kernel Cin {kernel.shape[1]}")


def causal_conv(x, kernel, dilation=1):
    """Causal convolution along axis 0 with channels on the last axis.

    ``x`` is ``T x ... x Cin``; middle axes are carried through untouched
    (kernel width 1). ``kernel`` is ``K x Cin x Cout`` and the input is
    left-padded with ``(K-1)*dilation`` zero frames, so output frame ``t``
    sees inputs ``t - (K-1-j)*dilation`` for taps ``j = 0..K-1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_conv(x, kernel, dilation)
    K, cin, cout = kernel.shape
    dilation = int(dilation)
    w2 = kernel.data.reshape(K * cin, cout)
    cols = _im2col(x.data, K, dilation)
    T = x.shape[0]

    def backward(g):
        g2 = g.reshape(-1, cout)
        gcols = np.matmul(g2, w2.T).reshape(cols.shape)
        gw = np.matmul(cols.reshape(-1, K * cin).T, g2).reshape(K, cin, cout)
        gx = np.zeros(x.shape)
        for j, s in enumerate(_conv_shifts(K, dilation)):
            if s < T:
                gx[: T - s] += gcols[s:, ..., j * cin:(j + 1) * cin]
        return gx, gw

    return _make(_mm(cols, w2), (x, kernel), backward, "causal_conv")


def causal_conv1d(x, kernel, dilation=1):
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"causal_conv1d expects T x Cin, got {x.shape}")
    return causal_conv(x, kernel, dilation)


def causal_conv2d_time(x, kernel, dilation=1):
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"causal_conv2d_time expects T x N x Cin, got {x.shape}")
    return causal_conv(x, kernel, dilation)


def conv_receptive_field(K, dilation):
    return (K - 1) * dilation + 1


def causal_conv_step(window, kernel, dilation=1):
    """Output of ``causal_conv`` at the newest frame of ``window``.

    ``window`` holds the most recent inputs (oldest first, at most
    ``(K-1)*dilation + 1`` frames needed). Missing history counts as zeros,
    exactly like the batch left padding. Returns a ``1 x ... x Cout`` array
    which, under ``row_invariant()``, equals the batch row bit for bit.
    """
    window = np.asarray(window, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    K, cin, cout = kernel.shape
    L = window.shape[0]
    cols = np.zeros((1,) + window.shape[1:-1] + (K * cin,))
    for j, s in enumerate(_conv_shifts(K, int(dilation))):
        if s < L:
            cols[0, ..., j * cin:(j + 1) * cin] = window[L - 1 - s]
    return _mm(cols, kernel.reshape(K * cin, cout))


# optimisation


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with decoupled weight decay, in place on ``params``.

    ``params`` maps names to Tensors and ``grads`` maps the same names to
    arrays (missing entries count as zero gradient).
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}", "optimizer.lr")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = p.data - lr * update - lr * weight_decay * p.data


# checkpoint container

_FORMAT = "anticipation-tensors/1"


def save_tensors(path, tensors, meta=None):
    """Write named float64 arrays as a JSON manifest line plus a raw payload.

    The payload is little-endian IEEE-754, so loading is bit exact.
    """
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        blob = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": "f64", "shape": list(arr.shape),
                        "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"format": _FORMAT, "tensors": entries, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    cut = raw.index(b"\n")
    manifest = json.loads(raw[:cut].decode("utf-8"))
    if manifest.get("format") != _FORMAT:
        raise ValueError(f"{path}: not a tensor container (format {manifest.get('format')!r})")
    payload = memoryview(raw)[cut + 1:]
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f64":
            raise ValueError(f"{path}: unsupported dtype {e['dtype']!r} for {e['name']}")
        chunk = payload[e["offset"]: e["offset"] + e["length"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return tensors, manifest["meta"]
