"""Kernel backends: loop-oracle exactness and cross-backend agreement."""

import numpy as np
import pytest

from hmseg import kernels
from hmseg import autodiff as ad

from oracles import conv2d_loops

BACKENDS = sorted(kernels.available_backends())


@pytest.fixture(params=BACKENDS)
def backend(request):
    prev = kernels.backend_name()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


def conv_cases(rng, n=12):
    for _ in range(n):
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        h = int(rng.integers(3, 10))
        w = int(rng.integers(3, 10))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, (k + 1) // 2 + 1))
        # floor convention: remainder rows/columns are legal, kernel must fit
        if (h + 2 * pad - k) < 0 or (w + 2 * pad - k) < 0:
            continue
        batch = int(rng.integers(1, 3))
        yield batch, cin, cout, h, w, k, stride, pad


class TestConvAgainstLoops:
    def test_integer_inputs_exact(self, rng, backend):
        """Integer-valued tensors make every summation order exact, so the
        backend must match the quadruple-loop oracle bit for bit."""
        for batch, cin, cout, h, w, k, stride, pad in conv_cases(rng):
            x = rng.integers(-8, 9, size=(batch, cin, h, w)).astype(np.float32)
            wgt = rng.integers(-4, 5, size=(cout, cin, k, k)).astype(np.float32)
            b = rng.integers(-4, 5, size=cout).astype(np.float32)
            got = kernels.conv2d_forward(x, wgt, stride, pad) + b[None, :, None, None]
            want = conv2d_loops(x, wgt, b, stride, pad)
            np.testing.assert_array_equal(got, want)

    def test_float_inputs_close(self, rng, backend):
        for batch, cin, cout, h, w, k, stride, pad in conv_cases(rng, n=8):
            x = rng.standard_normal((batch, cin, h, w)).astype(np.float32)
            wgt = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
            b = rng.standard_normal(cout).astype(np.float32)
            got = kernels.conv2d_forward(x, wgt, stride, pad) + b[None, :, None, None]
            want = conv2d_loops(x, wgt, b, stride, pad)
            np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


class TestBackendAgreement:
    def test_all_paths_agree_between_backends(self, rng):
        if len(BACKENDS) < 2:
            pytest.skip("only one backend built")
        for batch, cin, cout, h, w, k, stride, pad in conv_cases(rng):
            x = rng.standard_normal((batch, cin, h, w))
            wgt = rng.standard_normal((cout, cin, k, k))
            oh = (h + 2 * pad - k) // stride + 1
            ow = (w + 2 * pad - k) // stride + 1
            dy = rng.standard_normal((batch, cout, oh, ow))
            results = {}
            for name in BACKENDS:
                kernels.set_backend(name)
                results[name] = (
                    kernels.conv2d_forward(x, wgt, stride, pad),
                    kernels.conv2d_backward_input(dy, wgt, stride, pad, h, w),
                    kernels.conv2d_backward_weight(x, dy, stride, pad, k, k),
                )
            a, b = (results[n] for n in BACKENDS[:2])
            for ga, gb in zip(a, b):
                np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-10)

    def test_adjoint_identity(self, rng, backend):
        """<conv(x), dy> == <x, conv_backward_input(dy)> pins the backward
        as the true adjoint of the forward."""
        x = rng.standard_normal((1, 3, 7, 7))
        wgt = rng.standard_normal((4, 3, 3, 3))
        dy = rng.standard_normal((1, 4, 4, 4))
        y = kernels.conv2d_forward(x, wgt, 2, 1)
        dx = kernels.conv2d_backward_input(dy, wgt, 2, 1, 7, 7)
        np.testing.assert_allclose((y * dy).sum(), (x * dx).sum(), rtol=1e-10)


class TestBilinearKernels:
    def test_matrix_rows_are_stochastic(self):
        for insz, outsz in [(2, 4), (5, 3), (7, 7), (1, 4), (3, 1), (48, 96)]:
            m = kernels.resize_matrix(insz, outsz, np.float64)
            assert m.shape == (outsz, insz)
            assert np.all(m >= 0)
            np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)

    def test_forward_backward_adjoint(self, rng):
        x = rng.standard_normal((2, 3, 5, 4))
        dy = rng.standard_normal((2, 3, 9, 7))
        y = kernels.bilinear_forward(x, 9, 7)
        dx = kernels.bilinear_backward(dy, 5, 4)
        np.testing.assert_allclose((y * dy).sum(), (x * dx).sum(), rtol=1e-10)


class TestMacCounter:
    def test_counts_forward_macs(self, rng, backend):
        kernels.reset_mac_count()
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        kernels.conv2d_forward(x, w, 1, 1)
        assert kernels.mac_count() == 2 * 4 * 3 * 3 * 3 * 8 * 8

    def test_quarter_area_quarter_macs(self, rng, backend):
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        kernels.reset_mac_count()
        kernels.conv2d_forward(rng.standard_normal((1, 3, 32, 32)).astype(np.float32), w, 1, 1)
        full = kernels.mac_count()
        kernels.reset_mac_count()
        kernels.conv2d_forward(rng.standard_normal((1, 3, 16, 16)).astype(np.float32), w, 1, 1)
        assert kernels.mac_count() * 4 == full
