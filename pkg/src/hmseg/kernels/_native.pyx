# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: C im2col/col2im around BLAS GEMM calls.

Matches the numpy backend bit-for-bit in layout and semantics (both reduce
to the same GEMM computation); only the packing loops differ.
"""

import numpy as np

from scipy.linalg.cython_blas cimport sgemm, dgemm

NAME = "native"

ctypedef fused real_t:
    float
    double


cdef void _gemm(char* ta, char* tb, int m, int n, int k, real_t alpha,
                real_t* a, int lda, real_t* b, int ldb, real_t beta,
                real_t* c, int ldc) noexcept nogil:
    if real_t is float:
        sgemm(ta, tb, &m, &n, &k, <float*>&alpha, <float*>a, &lda,
              <float*>b, &ldb, <float*>&beta, <float*>c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &k, <double*>&alpha, <double*>a, &lda,
              <double*>b, &ldb, <double*>&beta, <double*>c, &ldc)


cdef inline int _imax(int a, int b) noexcept nogil:
    return a if a > b else b


cdef inline int _imin(int a, int b) noexcept nogil:
    return a if a < b else b


cdef void _im2col(real_t[:, :, ::1] x, int kh, int kw, int stride, int pad,
                  int oh, int ow, real_t[:, ::1] col) noexcept nogil:
    cdef int cin = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int ci, ky, kx, oy, ox, iy, x0, lo, hi, row
    cdef real_t* dst
    cdef const real_t* src
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                row = (ci * kh + ky) * kw + kx
                x0 = kx - pad
                # output columns whose source col 0 <= ox*stride + x0 < w
                lo = 0 if x0 >= 0 else (-x0 + stride - 1) // stride
                hi = _imin(ow, (w - 1 - x0) // stride + 1) if x0 < w else 0
                lo = _imin(lo, ow)
                hi = _imax(hi, lo)
                for oy in range(oh):
                    iy = oy * stride + ky - pad
                    dst = &col[row, oy * ow]
                    if iy < 0 or iy >= h:
                        for ox in range(ow):
                            dst[ox] = 0
                        continue
                    for ox in range(lo):
                        dst[ox] = 0
                    src = &x[ci, iy, 0]
                    if stride == 1:
                        for ox in range(lo, hi):
                            dst[ox] = src[ox + x0]
                    else:
                        for ox in range(lo, hi):
                            dst[ox] = src[ox * stride + x0]
                    for ox in range(hi, ow):
                        dst[ox] = 0


cdef void _col2im_add(real_t[:, ::1] col, int kh, int kw, int stride, int pad,
                      int oh, int ow, real_t[:, :, ::1] x) noexcept nogil:
    cdef int cin = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef int ci, ky, kx, oy, ox, iy, x0, lo, hi, row
    cdef const real_t* src
    cdef real_t* dst
    for ci in range(cin):
        for ky in range(kh):
            for kx in range(kw):
                row = (ci * kh + ky) * kw + kx
                x0 = kx - pad
                lo = 0 if x0 >= 0 else (-x0 + stride - 1) // stride
                hi = _imin(ow, (w - 1 - x0) // stride + 1) if x0 < w else 0
                lo = _imin(lo, ow)
                hi = _imax(hi, lo)
                for oy in range(oh):
                    iy = oy * stride + ky - pad
                    if iy < 0 or iy >= h:
                        continue
                    src = &col[row, oy * ow]
                    dst = &x[ci, iy, 0]
                    if stride == 1:
                        for ox in range(lo, hi):
                            dst[ox + x0] += src[ox]
                    else:
                        for ox in range(lo, hi):
                            dst[ox * stride + x0] += src[ox]


def _fwd(real_t[:, :, :, ::1] x, real_t[:, :, :, ::1] w, int stride, int pad,
         real_t[:, :, :, ::1] y, real_t[:, ::1] col):
    cdef int batch = x.shape[0], cout = w.shape[0]
    cdef int kh = w.shape[2], kw = w.shape[3]
    cdef int oh = y.shape[2], ow = y.shape[3]
    cdef int kdim = col.shape[0], nw = oh * ow
    cdef int b
    with nogil:
        for b in range(batch):
            _im2col(x[b], kh, kw, stride, pad, oh, ow, col)
            # y[b] [Cout, NW] = W2 [Cout, K] @ col [K, NW]
            _gemm("N", "N", nw, cout, kdim, <real_t>1.0, &col[0, 0], nw,
                  &w[0, 0, 0, 0], kdim, <real_t>0.0, &y[b, 0, 0, 0], nw)


def _bwd_input(real_t[:, :, :, ::1] dy, real_t[:, :, :, ::1] w, int stride,
               int pad, real_t[:, :, :, ::1] dx, real_t[:, ::1] dcol):
    cdef int batch = dy.shape[0], cout = w.shape[0]
    cdef int kh = w.shape[2], kw = w.shape[3]
    cdef int oh = dy.shape[2], ow = dy.shape[3]
    cdef int kdim = dcol.shape[0], nw = oh * ow
    cdef int b
    with nogil:
        for b in range(batch):
            # dcol [K, NW] = W2^T [K, Cout] @ dy[b] [Cout, NW]
            _gemm("N", "T", nw, kdim, cout, <real_t>1.0, &dy[b, 0, 0, 0], nw,
                  &w[0, 0, 0, 0], kdim, <real_t>0.0, &dcol[0, 0], nw)
            _col2im_add(dcol, kh, kw, stride, pad, oh, ow, dx[b])


def _bwd_weight(real_t[:, :, :, ::1] x, real_t[:, :, :, ::1] dy, int stride,
                int pad, real_t[:, :, :, ::1] dw, real_t[:, ::1] col):
    cdef int batch = x.shape[0], cout = dy.shape[1]
    cdef int kh = dw.shape[2], kw = dw.shape[3]
    cdef int oh = dy.shape[2], ow = dy.shape[3]
    cdef int kdim = col.shape[0], nw = oh * ow
    cdef int b
    cdef real_t beta
    with nogil:
        for b in range(batch):
            _im2col(x[b], kh, kw, stride, pad, oh, ow, col)
            # dW2 [Cout, K] (+)= dy[b] [Cout, NW] @ col^T [NW, K]
            beta = <real_t>0.0 if b == 0 else <real_t>1.0
            _gemm("T", "N", kdim, cout, nw, <real_t>1.0, &col[0, 0], nw,
                  &dy[b, 0, 0, 0], nw, beta, &dw[0, 0, 0, 0], kdim)


def _out_size(in_size, k, stride, pad):
    return (in_size + 2 * pad - k) // stride + 1


def _checked(arr):
    if arr.dtype not in (np.float32, np.float64):
        raise TypeError(f"native kernels support float32/float64, got {arr.dtype}")
    return np.ascontiguousarray(arr)


# The im2col scratch matrix is the one large allocation per call; recycle it
# per thread so repeated small convs do not churn mmap'd blocks.
import threading

_scratch = threading.local()


def _colbuf(kdim, nw, dtype):
    pools = getattr(_scratch, "pools", None)
    if pools is None:
        pools = _scratch.pools = {}
    need = kdim * nw
    buf = pools.get(dtype.str)
    if buf is None or buf.size < need:
        buf = pools[dtype.str] = np.empty(need, dtype=dtype)
    return buf[:need].reshape(kdim, nw)


def conv2d_forward(x, w, stride, pad):
    x = _checked(x)
    w = _checked(w)
    batch, cin, h, width = x.shape
    cout, _, kh, kw = w.shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(width, kw, stride, pad)
    y = np.empty((batch, cout, oh, ow), dtype=x.dtype)
    col = _colbuf(cin * kh * kw, oh * ow, x.dtype)
    _fwd(x, w, stride, pad, y, col)
    return y


def conv2d_backward_input(dy, w, stride, pad, in_h, in_w):
    dy = _checked(dy)
    w = _checked(w)
    batch, cout, oh, ow = dy.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dx = np.zeros((batch, cin, in_h, in_w), dtype=dy.dtype)
    dcol = _colbuf(cin * kh * kw, oh * ow, dy.dtype)
    _bwd_input(dy, w, stride, pad, dx, dcol)
    return dx


def conv2d_backward_weight(x, dy, stride, pad, kh, kw):
    x = _checked(x)
    dy = _checked(dy)
    batch, cin, h, width = x.shape
    cout, oh, ow = dy.shape[1], dy.shape[2], dy.shape[3]
    dw = np.empty((cout, cin, kh, kw), dtype=x.dtype)
    col = _colbuf(cin * kh * kw, oh * ow, x.dtype)
    _bwd_weight(x, dy, stride, pad, dw, col)
    return dw
