"""Numeric kernels: convolution backends, bilinear resampling, MAC accounting.

Two interchangeable convolution backends exist:

* ``native`` -- a compiled extension (Cython im2col/col2im plus BLAS GEMM),
  used when the extension built successfully;
* ``numpy``  -- a pure-numpy fallback with identical semantics.

Selection happens once at import time; set ``HMSEG_KERNELS=numpy`` or
``HMSEG_KERNELS=native`` to force a backend. ``benchmarks/bench_kernels.py``
compares the two.

Every convolution call also feeds a global multiply-accumulate counter so
the relative cost of differently scaled forward passes can be measured.
"""

import functools
import os

import numpy as np

from ..errors import ConfigError, DimensionError
from . import numpy_backend

# Graph execution is single-threaded by contract and BLAS-internal threading
# on small GEMMs costs more in synchronization than it buys, so clamp the
# pools once at import. The handle is kept alive for the process lifetime.
try:
    import threadpoolctl
    _blas_limit = threadpoolctl.threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - threadpoolctl is a declared dependency
    _blas_limit = None

_BACKENDS = {"numpy": numpy_backend}
try:  # pragma: no cover - exercised only when the extension is missing
    from . import _native
    _BACKENDS["native"] = _native
except ImportError:
    _native = None

_requested = os.environ.get("HMSEG_KERNELS", "auto")
if _requested == "auto":
    _impl = _BACKENDS.get("native", numpy_backend)
elif _requested in _BACKENDS:
    _impl = _BACKENDS[_requested]
else:
    raise ConfigError(f"HMSEG_KERNELS={_requested!r}: expected 'auto', 'native' or 'numpy'")


def backend_name():
    return _impl.NAME


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Switch the conv backend at runtime (used by tests and benchmarks)."""
    global _impl
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _impl = _BACKENDS[name]


# ---------------------------------------------------------------------------
# multiply-accumulate accounting

_mac_count = 0


def add_macs(n):
    global _mac_count
    _mac_count += int(n)


def mac_count():
    return _mac_count


def reset_mac_count():
    global _mac_count
    _mac_count = 0


# ---------------------------------------------------------------------------
# convolution

def conv_output_size(in_size, k, stride, pad):
    # floor convention; strided kernels may leave a remainder row/column
    span = in_size + 2 * pad - k
    if span < 0:
        raise ConfigError(
            f"conv kernel does not fit: in={in_size} k={k} stride={stride} pad={pad} "
            f"gives no valid output extent")
    return span // stride + 1


def _pointwise(k, stride, pad):
    return k == (1, 1) and stride == 1 and pad == 0


def conv2d_forward(x, w, stride, pad):
    """x [B,Cin,H,W], w [Cout,Cin,kh,kw] -> [B,Cout,OH,OW] cross-correlation."""
    batch, cin, h, width = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(width, kw, stride, pad)
    add_macs(batch * cout * cin * kh * kw * oh * ow)
    if _pointwise((kh, kw), stride, pad):
        # 1x1 conv is a plain channel GEMM; no packing needed in any backend
        y = np.matmul(w.reshape(cout, cin), x.reshape(batch, cin, h * width))
        return y.reshape(batch, cout, h, width)
    return _impl.conv2d_forward(x, w, stride, pad)


def conv2d_backward_input(dy, w, stride, pad, in_h, in_w):
    batch, cout, oh, ow = dy.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    add_macs(batch * cout * cin * kh * kw * oh * ow)
    if _pointwise((kh, kw), stride, pad):
        dx = np.matmul(w.reshape(cout, cin).T, dy.reshape(batch, cout, oh * ow))
        return dx.reshape(batch, cin, in_h, in_w)
    return _impl.conv2d_backward_input(dy, w, stride, pad, in_h, in_w)


def conv2d_backward_weight(x, dy, stride, pad, kh, kw):
    batch, cout, oh, ow = dy.shape
    cin = x.shape[1]
    add_macs(batch * cout * cin * kh * kw * oh * ow)
    if _pointwise((kh, kw), stride, pad):
        dw = np.matmul(dy.reshape(batch, cout, oh * ow),
                       x.reshape(batch, cin, oh * ow).transpose(0, 2, 1)).sum(axis=0)
        return dw.reshape(cout, cin, 1, 1)
    return _impl.conv2d_backward_weight(x, dy, stride, pad, kh, kw)


# ---------------------------------------------------------------------------
# bilinear resampling (separable; shared by both backends)

@functools.lru_cache(maxsize=256)
def _resize_matrix_f64(in_size, out_size):
    """Row-stochastic [out_size, in_size] interpolation matrix.

    Sample positions follow the half-pixel convention: source coordinate
    (i + 0.5) * in/out - 0.5, clamped at the borders, so resizing to the
    same size is the identity and constants are preserved exactly.
    """
    m = np.zeros((out_size, in_size))
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    i0 = np.floor(src).astype(int)
    frac = src - i0
    lo = np.clip(i0, 0, in_size - 1)
    hi = np.clip(i0 + 1, 0, in_size - 1)
    rows = np.arange(out_size)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_matrix(in_size, out_size, dtype):
    return _resize_matrix_f64(in_size, out_size).astype(dtype)


def bilinear_forward(x, out_h, out_w):
    """x [..., H, W] -> [..., out_h, out_w]; linear in x."""
    h, w = x.shape[-2], x.shape[-1]
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear resize target must be >= 1, got {out_h}x{out_w}")
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = resize_matrix(h, out_h, x.dtype)
    rw = resize_matrix(w, out_w, x.dtype)
    return np.matmul(rh, np.matmul(x, rw.T))


def bilinear_backward(dy, in_h, in_w):
    """Adjoint of bilinear_forward: scatter dy back to the input grid."""
    out_h, out_w = dy.shape[-2], dy.shape[-1]
    if (in_h, in_w) == (out_h, out_w):
        return dy.copy()
    rh = resize_matrix(in_h, out_h, dy.dtype)
    rw = resize_matrix(in_w, out_w, dy.dtype)
    return np.matmul(rh.T, np.matmul(dy, rw))
