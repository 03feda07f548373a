"""Pure-numpy convolution kernels (fallback backend).

Forward uses a strided im2col view fed into one BLAS matmul per batch
element. The input-gradient path scatters through a small loop over the
kernel window, which keeps everything as dense vectorized slice ops.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _window_view(xp, kh, kw, stride):
    # [B, Cin, OH, OW, kh, kw]
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, pad):
    v = _window_view(_pad(x, pad), w.shape[2], w.shape[3], stride)
    y = np.tensordot(v, w, axes=([1, 4, 5], [1, 2, 3]))  # [B, OH, OW, Cout]
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward_input(dy, w, stride, pad, in_h, in_w):
    batch, _, out_h, out_w = dy.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    dcol = np.tensordot(w, dy, axes=([0], [1]))  # [Cin, kh, kw, B, OH, OW]
    dxp = np.zeros((batch, cin, in_h + 2 * pad, in_w + 2 * pad), dtype=dy.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky:ky + stride * out_h:stride, kx:kx + stride * out_w:stride] += \
                dcol[:, ky, kx].transpose(1, 0, 2, 3)
    if pad == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, pad:pad + in_h, pad:pad + in_w])


def conv2d_backward_weight(x, dy, stride, pad, kh, kw):
    v = _window_view(_pad(x, pad), kh, kw, stride)
    # contract over batch and output positions -> [Cout, Cin, kh, kw]
    return np.tensordot(dy, v, axes=([0, 2, 3], [0, 2, 3]))
