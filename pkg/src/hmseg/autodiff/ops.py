"""Differentiable operations over :class:`~hmseg.autodiff.tensor.Tensor`.

The set is deliberately small: exactly what a conv trunk with normalized
heads, bilinear rescaling, pointwise fusion arithmetic and a masked
cross-entropy loss needs. Channel layout is [C,H,W] or [B,C,H,W]; ops that
care about the channel axis locate it from the rank.
"""

import numpy as np
from scipy.special import expit

from .. import kernels
from ..errors import ConfigError, DataError, DimensionError, UsageError
from .tensor import Tensor, check_same_dtype, record

ELEMENTWISE_OPS = ("add", "mul", "sub")
ACTIVATIONS = ("relu", "sigmoid")


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _channel_axis(ndim):
    if ndim < 3:
        raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got rank {ndim}")
    return ndim - 3


# ---------------------------------------------------------------------------
# convolution

def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of x [B,Cin,H,W] (or batchless [Cin,H,W]) with
    w [Cout,Cin,kh,kw] plus bias."""
    check_same_dtype(x, w, b)
    if x.data.ndim not in (3, 4) or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects [B,Cin,H,W] or [Cin,H,W] input, got rank {x.data.ndim}")
    if b.data.shape != (w.data.shape[0],):
        raise DimensionError(f"conv2d bias shape {b.data.shape} != ({w.data.shape[0]},)")
    batchless = x.data.ndim == 3
    xd = x.data[None] if batchless else x.data
    wd = w.data
    in_h, in_w = xd.shape[2], xd.shape[3]
    y = kernels.conv2d_forward(xd, wd, stride, padding)
    y += b.data[None, :, None, None]

    def bwd(gout):
        g = np.ascontiguousarray(gout[None] if batchless else gout)
        dx = dw = db = None
        if x.requires_grad:
            dx = kernels.conv2d_backward_input(g, wd, stride, padding, in_h, in_w)
            if batchless:
                dx = dx[0]
        if w.requires_grad:
            dw = kernels.conv2d_backward_weight(xd, g, stride, padding,
                                                wd.shape[2], wd.shape[3])
        if b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return record("conv2d", (x, w, b), y[0] if batchless else y, bwd)


# ---------------------------------------------------------------------------
# group normalization

def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Per-sample, per-group standardization followed by a channel affine."""
    check_same_dtype(x, gamma, beta)
    if x.data.ndim not in (3, 4):
        raise DimensionError(f"group_norm expects [B,C,H,W] or [C,H,W], got rank {x.data.ndim}")
    batchless = x.data.ndim == 3
    xdata = x.data[None] if batchless else x.data
    batch, ch, h, w = xdata.shape
    if ch % groups != 0:
        raise ConfigError(f"group_norm: {ch} channels not divisible by {groups} groups")
    xg = xdata.reshape(batch, groups, ch // groups, h, w)
    mean = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = ((xg - mean) * inv_std).reshape(batch, ch, h, w)
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(gout):
        g = gout[None] if batchless else gout
        dgamma = dbeta = dx = None
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            dbeta = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dxh = (g * gamma.data[None, :, None, None]) \
                .reshape(batch, groups, ch // groups, h, w)
            xh = xhat.reshape(batch, groups, ch // groups, h, w)
            m1 = dxh.mean(axis=(2, 3, 4), keepdims=True)
            m2 = (dxh * xh).mean(axis=(2, 3, 4), keepdims=True)
            dx = (inv_std * (dxh - m1 - xh * m2)).reshape(batch, ch, h, w)
            if batchless:
                dx = dx[0]
        return dx, dgamma, dbeta

    return record("group_norm", (x, gamma, beta), y[0] if batchless else y, bwd)


# ---------------------------------------------------------------------------
# bilinear resize

def bilinear_resize(x, out_h, out_w):
    """Resize the trailing two axes; backward scatters by the same weights."""
    in_h, in_w = x.data.shape[-2], x.data.shape[-1]
    _channel_axis(x.data.ndim)
    y = kernels.bilinear_forward(x.data, out_h, out_w)

    def bwd(gout):
        return (kernels.bilinear_backward(gout, in_h, in_w),)

    return record("bilinear_resize", (x,), y, bwd)


# ---------------------------------------------------------------------------
# pointwise arithmetic

def _reduce_to(shape, g):
    """Sum g down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def elementwise(op, a, b):
    """Pointwise add/mul/sub; b may be a same-shape tensor, a single-channel
    map broadcast across channels, or a python scalar."""
    if op not in ELEMENTWISE_OPS:
        raise UsageError(f"elementwise op must be one of {ELEMENTWISE_OPS}, got {op!r}")
    if not isinstance(b, Tensor):  # scalar constant
        s = float(b)
        fwd = {"add": a.data + s, "mul": a.data * s, "sub": a.data - s}[op]

        def bwd_scalar(gout):
            if op == "mul":
                return (gout * s,)
            return (gout,)

        return record(op, (a,), fwd, bwd_scalar)

    check_same_dtype(a, b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        if len(sa) != len(sb):
            raise DimensionError(f"elementwise: rank mismatch {sa} vs {sb}")
        ch = _channel_axis(len(sa))
        ok = all(x == y or (i == ch and 1 in (x, y)) for i, (x, y) in enumerate(zip(sa, sb)))
        if not ok:
            raise DimensionError(f"elementwise: shapes {sa} and {sb} not broadcastable")
    fwd = {"add": lambda: a.data + b.data,
           "mul": lambda: a.data * b.data,
           "sub": lambda: a.data - b.data}[op]()

    def bwd(gout):
        ga = gb = None
        if a.requires_grad:
            ga = gout * b.data if op == "mul" else gout
            ga = _reduce_to(sa, ga)
        if b.requires_grad:
            if op == "mul":
                gb = gout * a.data
            elif op == "sub":
                gb = -gout
            else:
                gb = gout
            gb = _reduce_to(sb, gb)
        return ga, gb

    return record(op, (a, b), fwd, bwd)


def add(a, b):
    return elementwise("add", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


# ---------------------------------------------------------------------------
# activations

def activation(op, x):
    if op not in ACTIVATIONS:
        raise UsageError(f"activation must be one of {ACTIVATIONS}, got {op!r}")
    if op == "relu":
        y = np.maximum(x.data, 0)

        def bwd(gout):
            return (gout * (x.data > 0),)
    else:
        # keep the output strictly inside (0,1) even where float rounding
        # would saturate it
        dt = x.data.dtype
        y = np.clip(expit(x.data), np.finfo(dt).tiny, np.nextafter(dt.type(1), dt.type(0)))

        def bwd(gout):
            return (gout * y * (1 - y),)

    return record(op, (x,), y, bwd)


def relu(x):
    return activation("relu", x)


def sigmoid(x):
    return activation("sigmoid", x)


# ---------------------------------------------------------------------------
# softmax over channels

def softmax_channels(x):
    """Per-pixel distribution over the channel axis, max-stabilized."""
    ax = _channel_axis(x.data.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bwd(gout):
        dot = (gout * y).sum(axis=ax, keepdims=True)
        return (y * (gout - dot),)

    return record("softmax_channels", (x,), y, bwd)


# ---------------------------------------------------------------------------
# masked cross-entropy

def cross_entropy_ignore(logits, labels, ignore_id=255):
    """Mean negative log-softmax over pixels whose label is not ignore_id.

    ``labels`` is an integer array shaped like the logits without their
    channel axis. All ignored -> zero loss and zero gradients.
    """
    labels = np.asarray(labels)
    ax = _channel_axis(logits.data.ndim)
    spatial = logits.data.shape[:ax] + logits.data.shape[ax + 1:]
    if labels.shape != spatial:
        raise DimensionError(f"labels shape {labels.shape} != logits sans channel {spatial}")
    nclass = logits.data.shape[ax]
    lab = labels.astype(np.int64)
    valid = lab != ignore_id
    bad = valid & ((lab < 0) | (lab >= nclass))
    if bad.any():
        raise DataError(
            f"label value {int(lab[bad][0])} outside 0..{nclass - 1} and != ignore {ignore_id}")
    n = int(valid.sum())
    dtype = logits.data.dtype
    if n == 0:
        def bwd_empty(gout):
            return (np.zeros_like(logits.data),)

        return record("cross_entropy_ignore", (logits,), np.asarray(0.0, dtype=dtype), bwd_empty)

    z = logits.data - logits.data.max(axis=ax, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))
    lab_safe = np.where(valid, lab, 0)
    picked = np.take_along_axis(logp, np.expand_dims(lab_safe, ax), axis=ax).squeeze(ax)
    loss = -(picked * valid).sum() / n
    loss = np.asarray(loss, dtype=dtype)

    def bwd(gout):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(lab_safe, ax), 1.0, axis=ax)
        mask = np.expand_dims(valid, ax)
        g = (p - onehot) * mask / n
        return (g * gout,)

    return record("cross_entropy_ignore", (logits,), loss, bwd)


# ---------------------------------------------------------------------------
# reduction

def tensor_sum(x):
    """Sum of all elements as a scalar tensor."""
    y = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(gout):
        return (np.broadcast_to(gout, x.data.shape),)

    return record("sum", (x,), y, bwd)
