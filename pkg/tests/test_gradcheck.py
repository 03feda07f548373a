"""Finite-difference verification of every differentiable op.

All checks run in verification (float64) precision with central differences
(h = 1e-5) and demand relative error <= 1e-6; one check repeats in standard
precision at the looser 1e-2 bound.
"""

import numpy as np
import pytest

from hmseg import autodiff as ad
from hmseg import kernels

from oracles import numeric_grad

H = 1e-5
TOL = 1e-6


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def check_input_grad(build_loss, x0, tol=TOL):
    """Compare autodiff dLoss/dx against central differences at x0."""
    with ad.precision("verification"):
        x = ad.Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
        loss = build_loss(x)
        ad.backward(loss)
        got = x.grad
        want = numeric_grad(lambda arr: float(build_loss_detached(build_loss, arr)), x0.copy(), h=H)
    assert rel_err(got, want) <= tol, f"rel err {rel_err(got, want):.3g}"


def build_loss_detached(build_loss, arr):
    with ad.no_grad():
        t = ad.Tensor(arr, dtype=np.float64)
        return build_loss(t).data


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request):
    prev = kernels.backend_name()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


class TestOpGradients:
    def test_conv2d_input_weight_bias(self, rng, backend):
        x0 = rng.standard_normal((2, 3, 6, 5))
        w0 = rng.standard_normal((4, 3, 3, 3))
        b0 = rng.standard_normal(4)
        with ad.precision("verification"):
            for wrt in ("x", "w", "b"):
                tensors = {
                    "x": ad.Tensor(x0, requires_grad=wrt == "x", dtype=np.float64),
                    "w": ad.Tensor(w0, requires_grad=wrt == "w", dtype=np.float64),
                    "b": ad.Tensor(b0, requires_grad=wrt == "b", dtype=np.float64),
                }

                def loss_of(arr):
                    vals = {k: v.data for k, v in tensors.items()}
                    vals[wrt] = arr
                    with ad.no_grad():
                        out = ad.conv2d(ad.Tensor(vals["x"], dtype=np.float64),
                                        ad.Tensor(vals["w"], dtype=np.float64),
                                        ad.Tensor(vals["b"], dtype=np.float64),
                                        stride=1, padding=1)
                        return float((out.data ** 2).sum())

                out = ad.conv2d(tensors["x"], tensors["w"], tensors["b"], stride=1, padding=1)
                ad.backward(ad.tensor_sum(ad.mul(out, out)))
                got = tensors[wrt].grad
                want = numeric_grad(loss_of, {"x": x0, "w": w0, "b": b0}[wrt].copy(), h=H)
                assert rel_err(got, want) <= TOL
                ad.reset_tape()

    def test_conv2d_strided(self, rng, backend):
        w0 = rng.standard_normal((2, 2, 3, 3))
        b0 = rng.standard_normal(2)

        def build(x):
            out = ad.conv2d(x, ad.Tensor(w0, dtype=np.float64),
                            ad.Tensor(b0, dtype=np.float64), stride=2, padding=1)
            return ad.tensor_sum(ad.mul(out, out))

        check_input_grad(build, rng.standard_normal((1, 2, 7, 7)))

    def test_group_norm(self, rng):
        g0 = rng.standard_normal(6)
        be0 = rng.standard_normal(6)

        def build(x):
            y = ad.group_norm(x, 3, ad.Tensor(g0, dtype=np.float64),
                              ad.Tensor(be0, dtype=np.float64), eps=1e-5)
            return ad.tensor_sum(ad.mul(y, y))

        check_input_grad(build, rng.standard_normal((2, 6, 4, 3)))

    def test_group_norm_gamma_beta(self, rng):
        x0 = rng.standard_normal((1, 4, 5, 5))
        with ad.precision("verification"):
            gamma = ad.Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
            beta = ad.Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
            x = ad.Tensor(x0, dtype=np.float64)
            y = ad.group_norm(x, 2, gamma, beta)
            ad.backward(ad.tensor_sum(ad.mul(y, y)))

            def loss_gamma(arr):
                with ad.no_grad():
                    out = ad.group_norm(ad.Tensor(x0, dtype=np.float64),
                                        2, ad.Tensor(arr, dtype=np.float64),
                                        ad.Tensor(beta.data, dtype=np.float64))
                    return float((out.data ** 2).sum())

            want = numeric_grad(loss_gamma, gamma.data.copy(), h=H)
            assert rel_err(gamma.grad, want) <= TOL

    def test_bilinear_resize_up_and_down(self, rng):
        for out_hw in [(9, 7), (3, 2)]:
            def build(x, hw=out_hw):
                y = ad.bilinear_resize(x, *hw)
                return ad.tensor_sum(ad.mul(y, y))

            check_input_grad(build, rng.standard_normal((1, 2, 5, 4)))

    def test_elementwise_and_broadcast(self, rng):
        other = rng.standard_normal((1, 4, 3))

        def build(x):
            y = ad.mul(x, ad.Tensor(other, dtype=np.float64))
            z = ad.add(y, x)
            return ad.tensor_sum(ad.mul(z, z))

        check_input_grad(build, rng.standard_normal((5, 4, 3)))

        def build_b(x):
            y = ad.mul(ad.Tensor(rng2, dtype=np.float64), x)
            return ad.tensor_sum(ad.mul(y, y))

        rng2 = rng.standard_normal((5, 4, 3))
        check_input_grad(build_b, rng.standard_normal((1, 4, 3)))

    def test_relu_away_from_kink(self, rng):
        x0 = rng.standard_normal((2, 3, 4))
        x0[np.abs(x0) < 0.1] = 0.2  # keep finite differences off the kink

        def build(x):
            return ad.tensor_sum(ad.mul(ad.relu(x), ad.relu(x)))

        check_input_grad(build, x0)

    def test_sigmoid(self, rng):
        def build(x):
            y = ad.sigmoid(x)
            return ad.tensor_sum(ad.mul(y, y))

        check_input_grad(build, rng.standard_normal((2, 3, 4)))

    def test_softmax_channels(self, rng):
        mixer = rng.standard_normal((4, 3, 3))

        def build(x):
            y = ad.softmax_channels(x)
            z = ad.mul(y, ad.Tensor(mixer, dtype=np.float64))
            return ad.tensor_sum(ad.mul(z, z))

        check_input_grad(build, rng.standard_normal((4, 3, 3)))

    def test_cross_entropy_ignore(self, rng):
        labels = rng.integers(0, 3, size=(4, 4))
        labels[0, 0] = 255
        labels[3, 2] = 255

        def build(x):
            return ad.cross_entropy_ignore(x, labels, ignore_id=255)

        check_input_grad(build, rng.standard_normal((3, 4, 4)))

    def test_sum(self, rng):
        check_input_grad(lambda x: ad.tensor_sum(ad.mul(x, x)),
                         rng.standard_normal((2, 2, 3)))


class TestGraphGradients:
    def test_three_layer_random_graph(self, rng, backend):
        """conv -> group_norm -> relu -> conv -> sigmoid -> weighted sum."""
        w1 = rng.standard_normal((4, 2, 3, 3)) * 0.5
        b1 = rng.standard_normal(4) * 0.1
        g1 = rng.standard_normal(4)
        be1 = rng.standard_normal(4)
        w2 = rng.standard_normal((3, 4, 3, 3)) * 0.5
        b2 = rng.standard_normal(3) * 0.1
        mix = rng.standard_normal((1, 3, 6, 6))

        def forward(x):
            h1 = ad.conv2d(x, ad.Tensor(w1, dtype=np.float64),
                           ad.Tensor(b1, dtype=np.float64), padding=1)
            h2 = ad.relu(ad.group_norm(h1, 2, ad.Tensor(g1, dtype=np.float64),
                                       ad.Tensor(be1, dtype=np.float64)))
            h3 = ad.conv2d(h2, ad.Tensor(w2, dtype=np.float64),
                           ad.Tensor(b2, dtype=np.float64), padding=1)
            h4 = ad.sigmoid(ad.bilinear_resize(h3, 6, 6))
            return ad.tensor_sum(ad.mul(h4, ad.Tensor(mix, dtype=np.float64)))

        check_input_grad(forward, rng.standard_normal((1, 2, 6, 6)))

    def test_standard_precision_looser_bound(self, rng):
        """Same check in float32 passes at the 1e-2 bound."""
        x0 = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w0 = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b0 = np.zeros(3, dtype=np.float32)
        x = ad.Tensor(x0, requires_grad=True)
        out = ad.conv2d(x, ad.Tensor(w0), ad.Tensor(b0), padding=1)
        ad.backward(ad.tensor_sum(ad.mul(out, out)))

        def loss_of(arr):
            with ad.no_grad():
                y = ad.conv2d(ad.Tensor(arr.astype(np.float32)), ad.Tensor(w0),
                              ad.Tensor(b0), padding=1)
                return float((y.data.astype(np.float64) ** 2).sum())

        want = numeric_grad(loss_of, x0.astype(np.float64), h=1e-3)
        assert rel_err(x.grad.astype(np.float64), want) <= 1e-2
