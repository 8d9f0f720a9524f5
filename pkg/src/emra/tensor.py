"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a node holding its parents and an adjoint closure; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph once in reverse
topological order and accumulates ``.grad`` on the leaves.

All operations broadcast over leading axes, numpy style. The model code uses
this both for image batches and for probe batches in finite-difference
checks, where one parameter carries an extra leading axis of perturbed
copies.

Precision follows the operands: float32 arrays stay float32 (training),
float64 arrays stay float64 (gradient verification).
"""
import math
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigError, DataError, NumericError, ShapeError

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording a graph (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _topo_order(root):
    order = []
    seen = set()
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- metadata -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- differentiation ------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if not self.requires_grad:
            return
        grads = {id(self): grad}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def zero_grad(self):
        self.grad = None

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def parameter(data, name=None):
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True, name=name)


# -- elementwise -------------------------------------------------------

def add(a, b):
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    b = _lift(b, a)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    b = _lift(b, a)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    b = _lift(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _result(out, (a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    x2 = xd * xd
    if not (is_grad_enabled() and x.requires_grad):
        # same arithmetic, in place, nothing kept for the adjoint
        x2 *= xd
        x2 *= 0.044715
        x2 += xd
        x2 *= c
        np.tanh(x2, out=x2)
        x2 += 1.0
        x2 *= xd
        x2 *= 0.5
        return _result(x2, (x,), None)
    t = np.tanh(c * (xd + 0.044715 * x2 * xd))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _result(out, (x,), backward)


# -- structural --------------------------------------------------------

def reshape(x, shape):
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def swapaxes(x, a, b):
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x, idx):
    """Basic (slice/int/Ellipsis) indexing only: the adjoint assumes no repeats."""
    src, dt = x.shape, x.dtype

    def backward(g):
        full = np.zeros(src, dtype=dt)
        full[idx] = g
        return (full,)

    return _result(x.data[idx], (x,), backward)


def broadcast_to(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _result(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors, axis):
    """Concatenate along ``axis`` (negative), broadcasting all other axes."""
    if axis >= 0:
        raise ValueError("concat expects a negative axis so leading axes can broadcast")
    nd = max(t.ndim for t in tensors)
    shapes = [(1,) * (nd - t.ndim) + t.shape for t in tensors]
    others = [tuple(1 if i == nd + axis else s for i, s in enumerate(sh)) for sh in shapes]
    try:
        common = np.broadcast_shapes(*others)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    parts = []
    for t, sh in zip(tensors, shapes):
        target = list(common)
        target[nd + axis] = sh[nd + axis]
        parts.append(broadcast_to(t, tuple(target)))
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def tsum(x, axis=None, keepdims=False):
    src = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / max(count, 1))


# -- linear algebra ----------------------------------------------------

def matmul(a, b):
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(np.matmul(ad, bd), (a, b), backward)


def linear(x, w, b=None):
    """``x @ w + b`` with ``x`` (..., N, Din), ``w`` (..., Din, Dout), ``b`` (..., Dout)."""
    y = matmul(x, w)
    if b is None:
        return y
    if b.ndim > 1:
        b = reshape(b, b.shape[:-1] + (1, b.shape[-1]))
    return y + b


# -- normalisation -----------------------------------------------------

def _max_last(x):
    """``x.max(axis=-1, keepdims=True)``; numpy's reduce is slow on short axes."""
    n = x.shape[-1]
    if n == 0 or n > 24:
        return x.max(axis=-1, keepdims=True)
    m = x[..., :1].copy()
    for j in range(1, n):
        np.maximum(m, x[..., j:j + 1], out=m)
    return m


def _sum_last(x, y=None):
    """Sum over the last axis (of ``x * y`` if given), keeping it as length 1."""
    if y is None:
        return np.einsum("...i->...", x)[..., None]
    return np.einsum("...i,...i->...", x, y)[..., None]


def softmax(x, axis=-1):
    xd = x.data
    top = _max_last(xd) if axis in (-1, xd.ndim - 1) else xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - top)
    y = e / (_sum_last(e) if axis in (-1, xd.ndim - 1) else e.sum(axis=axis, keepdims=True))

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def masked_softmax(x, mask, axis=-1):
    """Softmax over entries where ``mask`` is true; the rest are exactly 0.

    Every slice must contain at least one valid entry.
    """
    xd = x.data
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
    z = np.where(mask, xd, -np.inf)
    top = _max_last(z) if axis in (-1, z.ndim - 1) else z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z - top), 0.0).astype(xd.dtype)
    y = e / (_sum_last(e) if axis in (-1, xd.ndim - 1) else e.sum(axis=axis, keepdims=True))

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalise over the last axis, then scale and shift."""
    if gamma.shape[-1] != x.shape[-1] or beta.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    xd, gd = x.data, gamma.data
    inv_n = xd.dtype.type(1.0 / xd.shape[-1])
    xc = xd - _sum_last(xd) * inv_n
    var = _sum_last(xc, xc) * inv_n
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gd + beta.data

    def backward(g):
        gx_hat = g * gd
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (_unbroadcast(gx, xd.shape),
                _unbroadcast(g * xhat, gd.shape),
                _unbroadcast(g, beta.shape))

    return _result(out, (x, gamma, beta), backward)


# -- convolution -------------------------------------------------------

def _flat_lead(arrs_cores, dtype):
    lead = np.broadcast_shapes(*[a.shape[:a.ndim - c] for a, c in arrs_cores])
    n = int(np.prod(lead)) if lead else 1
    flat = []
    for a, c in arrs_cores:
        core = a.shape[a.ndim - c:]
        b = np.broadcast_to(a, lead + core).reshape((n,) + core)
        flat.append(np.ascontiguousarray(b, dtype=dtype))
    return lead, flat


def depthwise_conv3x3(x, k, b):
    """Per-channel 3x3 correlation, zero padding 1, stride 1.

    ``x`` (..., H, W, C), ``k`` (..., 3, 3, C), ``b`` (..., C).
    """
    if k.ndim < 3 or k.shape[-3:-1] != (3, 3):
        raise ConfigError(f"depthwise kernel must be 3x3 per channel, got {k.shape}")
    c = x.shape[-1]
    if k.shape[-1] != c or b.shape[-1] != c:
        raise ShapeError(f"depthwise_conv3x3: channels differ: x {x.shape}, k {k.shape}, b {b.shape}")
    dt = np.result_type(x.data, k.data, b.data)
    lead, (xf, kf, bf) = _flat_lead([(x.data, 3), (k.data, 3), (b.data, 1)], dt)
    out = kernels.dwconv3x3_forward(xf, kf, bf).reshape(lead + x.shape[-3:])
    shapes = (x.shape, k.shape, b.shape)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape((xf.shape[0],) + g.shape[len(lead):]), dtype=dt)
        gx, gk, gb = kernels.dwconv3x3_backward(xf, kf, gf)
        return (_unbroadcast(gx.reshape(lead + gx.shape[1:]), shapes[0]),
                _unbroadcast(gk.reshape(lead + gk.shape[1:]), shapes[1]),
                _unbroadcast(gb.reshape(lead + gb.shape[1:]), shapes[2]))

    return _result(out, (x, k, b), backward)


def pointwise_conv1x1(x, w, b):
    """Per-pixel linear map: ``x`` (..., H, W, Cin), ``w`` (..., Cin, Cout), ``b`` (..., Cout)."""
    h, wd, cin = x.shape[-3:]
    if w.shape[-2] != cin:
        raise ShapeError(f"pointwise_conv1x1: input has {cin} channels, weight {w.shape}")
    y = matmul(reshape(x, x.shape[:-3] + (h * wd, cin)), w)
    y = reshape(y, y.shape[:-2] + (h, wd, w.shape[-1]))
    return y + reshape(b, b.shape[:-1] + (1, 1, b.shape[-1]))


# -- resampling --------------------------------------------------------

def interp_matrix(n_in, n_out, dtype=np.float64):
    """Row ``o`` holds the 1-D bilinear weights of output sample ``o``.

    Half-pixel centres (align-corners off); negative source positions clamp
    to 0 and the upper neighbour clamps to the last sample.
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resize_array(x, out_h, out_w):
    """Bilinear resize of a plain array (..., H, W, C) with no graph."""
    h, w = x.shape[-3:-1]
    if (h, w) == (out_h, out_w):
        return x
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    lead, c = x.shape[:-3], x.shape[-1]
    y = np.matmul(ry, x.reshape(lead + (h, w * c))).reshape(lead + (out_h, w, c))
    return np.matmul(rx, y)


def bilinear_upsample(x, out_h, out_w):
    """Bilinear resampling of ``x`` (..., H, W, C) to (..., out_h, out_w, C)."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear output extents must be >= 1, got {(out_h, out_w)}")
    h, w = x.shape[-3:-1]
    if (h, w) == (out_h, out_w):
        return x
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    lead, c = x.shape[:-3], x.shape[-1]
    out = resize_array(x.data, out_h, out_w)

    def backward(g):
        t = np.matmul(rx.T, g).reshape(lead + (out_h, w * c))
        return (np.matmul(ry.T, t).reshape(lead + (h, w, c)),)

    return _result(out, (x,), backward)


# -- region fusion -----------------------------------------------------

def neighbor_fuse(q, regions, stride):
    """Mix region vectors into pixels through 3x3 neighbourhood weights.

    ``q`` (..., Hg*sh, Wg*sw, 9) holds per-pixel weights over the token
    offsets (-1,-1) .. (+1,+1) in raster order; ``regions`` (..., Hg, Wg, C).
    Off-grid neighbours contribute nothing.
    """
    sh, sw = stride
    hg, wg, c = regions.shape[-3:]
    if q.shape[-1] != 9 or q.shape[-3:-1] != (hg * sh, wg * sw):
        raise ShapeError(f"neighbor_fuse: weights {q.shape} do not fit regions {regions.shape} at stride {stride}")
    dt = np.result_type(q.data, regions.data)
    lead, (qf, rf) = _flat_lead([(q.data, 3), (regions.data, 3)], dt)
    out = kernels.fuse_forward(qf, rf, sh, sw)
    out = out.reshape(lead + out.shape[1:])
    shapes = (q.shape, regions.shape)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape((qf.shape[0],) + g.shape[len(lead):]), dtype=dt)
        gq, gr = kernels.fuse_backward(qf, rf, gf, sh, sw)
        return (_unbroadcast(gq.reshape(lead + gq.shape[1:]), shapes[0]),
                _unbroadcast(gr.reshape(lead + gr.shape[1:]), shapes[1]))

    return _result(out, (q, regions), backward)


# -- loss --------------------------------------------------------------

def _nll(xd, targets, ignore_index):
    n_cls = xd.shape[-1]
    t = np.broadcast_to(np.asarray(targets), xd.shape[:-1])
    valid = t != ignore_index
    bad = valid & ((t < 0) | (t >= n_cls))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"target {int(t[where])} at {where} outside [0, {n_cls}) and not ignore_index")
    safe = np.where(valid, t, 0)
    shifted = xd - _max_last(xd)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = -np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0] * valid
    return nll, logp, safe, valid


def _sample_scale(valid, dtype):
    axes = tuple(range(1, valid.ndim))
    count = valid.sum(axis=axes)
    return np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0).astype(dtype)


def cross_entropy(logits, targets, ignore_index=255, per_sample=False):
    """Mean negative log-likelihood of ``targets`` under softmax(``logits``).

    ``targets`` is an integer array broadcastable to ``logits.shape[:-1]``.
    Entries equal to ``ignore_index`` are skipped; if nothing is left the
    loss is 0 with a zero gradient. With ``per_sample`` the mean is taken
    separately for each index of the leading axis.
    """
    xd = logits.data
    nll, logp, safe, valid = _nll(xd, targets, ignore_index)
    if per_sample:
        scale = _sample_scale(valid, xd.dtype)
        out = nll.sum(axis=tuple(range(1, nll.ndim))) * scale
    else:
        count = int(valid.sum())
        scale = xd.dtype.type(1.0 / count if count else 0.0)
        out = np.asarray(nll.sum() * scale, dtype=xd.dtype)

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1.0, -1)
        p *= valid[..., None]
        if per_sample:
            w = (g * scale).reshape((-1,) + (1,) * (p.ndim - 1))
        else:
            w = g * scale
        return (p * w,)

    return _result(out, (logits,), backward)


def cross_entropy_terms(logits, targets, ignore_index=255):
    """Per-element contributions whose sum over all but the leading axis is
    the per-sample cross-entropy. Plain arrays, no graph."""
    xd = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    n_cls = xd.shape[-1]
    t = np.broadcast_to(np.asarray(targets), xd.shape[:-1])
    valid = t != ignore_index
    if ((t < 0) | (t >= n_cls))[valid].any():
        _nll(xd, targets, ignore_index)         # raises with the location
    z = xd - _max_last(xd)
    picked = np.take_along_axis(z, np.where(valid, t, 0)[..., None], axis=-1)[..., 0]
    np.exp(z, out=z)
    nll = (np.log(_sum_last(z)[..., 0]) - picked) * valid
    scale = _sample_scale(valid, xd.dtype)
    return nll * scale.reshape((-1,) + (1,) * (nll.ndim - 1))


# -- verification ------------------------------------------------------

def relative_errors(analytic, numeric):
    """Coordinatewise |a - n| / max(1e-8, |a| + |n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def relative_error(analytic, numeric):
    """max |a - n| / max(1e-8, |a| + |n|) over all coordinates."""
    r = relative_errors(analytic, numeric)
    return float(r.max()) if r.size else 0.0


def numeric_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` (array -> float) at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericError(f"non-finite function value while probing coordinate {i}")
        gf[i] = (hi - lo) / (2 * eps)
    return g


def _summed_difference(plus, minus):
    k = plus.shape[0]
    return (plus - minus).reshape(k, -1).sum(axis=1)


def numeric_grad_batched(f_batch, x, eps=1e-5, chunk=128, difference=None, indices=None):
    """Central differences with many probes per call.

    ``f_batch`` maps an array of shape (K,) + x.shape to K probe outputs
    (arrays of any trailing shape). ``difference(plus, minus)`` turns the
    outputs of the +eps and -eps probes into f(x+eps) - f(x-eps), one value
    per probe. The default treats the outputs as terms of a sum and
    differences them before summing, so a large constant part never enters
    the subtraction. Probes keep the dtype of ``x`` when it is a float wider
    than float32; otherwise they run in float64. With ``indices`` (flat
    positions) only those coordinates are probed; the rest stay 0.
    """
    difference = difference or _summed_difference
    x = np.asarray(x)
    work = x.dtype if x.dtype.kind == "f" and x.dtype.itemsize >= 8 else np.dtype(np.float64)
    x = x.astype(work, copy=False)
    n = x.size
    g = np.zeros(n, dtype=work)
    base = x.reshape(-1)
    todo = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64).reshape(-1)
    for start in range(0, todo.size, chunk):
        idx = todo[start:start + chunk]
        k = idx.size
        probes = np.repeat(base[None, :], 2 * k, axis=0)
        rows = np.arange(k)
        probes[rows, idx] += eps
        probes[k + rows, idx] -= eps
        vals = np.asarray(f_batch(probes.reshape((2 * k,) + x.shape)))
        if vals.ndim == 0 or vals.shape[0] != 2 * k:
            # the probed input never reached the output: every probe agrees
            vals = np.broadcast_to(vals, (2 * k,) + vals.shape[1:])
        if not np.all(np.isfinite(vals)):
            raise NumericError(f"non-finite function value while probing coordinates {idx[0]}..{idx[-1]}")
        g[idx] = np.asarray(difference(vals[:k], vals[k:])) / (2 * work.type(eps))
    return g.reshape(x.shape).astype(np.float64)


def cross_entropy_difference(plus, minus, targets, ignore_index=255):
    """Per-sample CE(plus) - CE(minus) for two nearby logit arrays.

    Evaluated from d = plus - minus as log1p(sum softmax(minus) * expm1(d))
    - d[target], which has the same value as subtracting the two losses but
    roundoff proportional to the logits, not to the loss.
    """
    n_cls = minus.shape[-1]
    t = np.asarray(targets)
    valid = t != ignore_index
    if ((t < 0) | (t >= n_cls))[valid].any():
        _nll(minus, targets, ignore_index)
    pick = ((t[..., None] == np.arange(n_cls)) & valid[..., None]).astype(minus.dtype)
    d = plus - minus
    w = np.exp(minus - _max_last(minus))
    w /= _sum_last(w)
    dlse = np.log1p(_sum_last(w, np.expm1(d))[..., 0])
    per = dlse * valid - _sum_last(d, pick)[..., 0]
    scale = _sample_scale(np.broadcast_to(valid, per.shape), minus.dtype)
    return per.reshape(per.shape[0], -1).sum(axis=1) * scale


def grad_check(f, x, eps=1e-5):
    """Max relative error between the analytic and central-difference gradient.

    ``f`` maps a Tensor to a scalar Tensor and must be pure. Runs in float64.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = parameter(base.copy())
    y = f(leaf)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericError("function value is not finite")
    y.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    def scalar(v):
        with no_grad():
            return float(f(Tensor(v)).data)

    return relative_error(analytic, numeric_grad(scalar, base, eps))
