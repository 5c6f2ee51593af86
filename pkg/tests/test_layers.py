import numpy as np
import pytest

from svrn.layers import (ConvSpec, OptimState, bilinear_upsample,
                         bilinear_upsample_backward, conv2d_backward,
                         conv2d_forward, deconv2d, deconv2d_backward,
                         glorot_uniform, maxpool2d, maxpool2d_backward,
                         sgd_step, sigmoid_bce, softmax_ce)
from svrn.vocab import IGNORE_LABEL

from gradcheck import check_grad, fd_gradient, max_rel_error


def conv_oracle(x, w, b, stride, pad):
    """Quadruple-loop direct convolution, written independently of im2col."""
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = b[co]
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += (w[co, ci, u, v] *
                                        xp[ni, ci, i * stride + u, j * stride + v])
                    out[ni, co, i, j] = acc
    return out


class TestConv2d:
    def test_all_ones_counting(self):
        x = np.ones((1, 1, 3, 3))
        w = np.ones((1, 1, 2, 2))
        out = conv2d_forward(x, w, np.zeros(1), ConvSpec(1, 1, 2, 2, 1, 0))
        assert out.shape == (1, 1, 2, 2)
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 4.0))

    def test_identity_kernel(self, rng):
        x = rng.random((2, 1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        out = conv2d_forward(x, w, np.zeros(1), ConvSpec(1, 1, 1, 1, 1, 0))
        np.testing.assert_array_equal(out, x)

    def test_against_loop_oracle(self, rng):
        x = rng.standard_normal((1, 3, 8, 8))
        w = rng.standard_normal((16, 3, 5, 5)) * 0.2
        b = rng.standard_normal(16) * 0.1
        spec = ConvSpec(3, 16, 5, 5, 1, 2)
        np.testing.assert_allclose(conv2d_forward(x, w, b, spec),
                                   conv_oracle(x, w, b, 1, 2), atol=1e-5)

    def test_strided_against_oracle(self, rng):
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        spec = ConvSpec(2, 4, 3, 3, 3, 0)
        np.testing.assert_allclose(conv2d_forward(x, w, b, spec),
                                   conv_oracle(x, w, b, 3, 0), atol=1e-10)

    def test_non_integral_extent(self, rng):
        with pytest.raises(ValueError):
            conv2d_forward(rng.random((1, 1, 5, 5)), np.ones((1, 1, 2, 2)),
                           np.zeros(1), ConvSpec(1, 1, 2, 2, 2, 0))

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            conv2d_forward(rng.random((1, 2, 4, 4)), np.ones((1, 1, 2, 2)),
                           np.zeros(1), ConvSpec(1, 1, 2, 2, 1, 0))


class TestConv2dBackward:
    def test_zero_grad_out(self, rng):
        x = rng.random((1, 2, 4, 4))
        w = rng.random((3, 2, 3, 3))
        spec = ConvSpec(2, 3, 3, 3, 1, 1)
        gx, gw, gb = conv2d_backward(np.zeros((1, 3, 4, 4)), x, w, spec)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_kernel_routing(self):
        spec = ConvSpec(1, 1, 1, 1, 1, 0)
        x = np.zeros((1, 1, 3, 3))
        gout = np.zeros((1, 1, 3, 3))
        gout[0, 0, 1, 2] = 1.0
        gx, _, _ = conv2d_backward(gout, x, np.ones((1, 1, 1, 1)), spec)
        np.testing.assert_array_equal(gx, gout)

    def test_finite_differences(self, verification_mode, rng):
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3)) * 0.5
        b = rng.standard_normal(3) * 0.2
        spec = ConvSpec(2, 3, 3, 3, 1, 1)
        proj = rng.standard_normal((2, 3, 5, 5))
        gx, gw, gb = conv2d_backward(proj, x, w, spec)
        check_grad(lambda v: float(np.sum(conv2d_forward(v, w, b, spec) * proj)),
                   x, gx)
        check_grad(lambda v: float(np.sum(conv2d_forward(x, v, b, spec) * proj)),
                   w, gw)
        check_grad(lambda v: float(np.sum(conv2d_forward(x, w, v, spec) * proj)),
                   b, gb)


class TestMaxPool:
    def test_simple_block(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
        out, idx = maxpool2d(x)
        assert out.item() == 4.0

    def test_tie_break_first_element(self):
        x = np.ones((1, 1, 4, 4))
        out, idx = maxpool2d(x)
        assert (idx == 0).all()
        g = maxpool2d_backward(np.ones_like(out), idx)
        expected = np.zeros((1, 1, 4, 4))
        expected[:, :, ::2, ::2] = 1.0
        np.testing.assert_array_equal(g, expected)

    def test_indivisible(self, rng):
        with pytest.raises(ValueError):
            maxpool2d(rng.random((1, 1, 5, 4)))

    def test_finite_differences_off_ties(self, verification_mode, rng):
        # distinct values keep the argmax stable under the FD step
        x = rng.permutation(8 * 8 * 4).reshape(1, 4, 8, 8).astype(np.float64)
        x += rng.uniform(-0.2, 0.2, x.shape)
        proj = rng.standard_normal((1, 4, 4, 4))

        def f(v):
            out, _ = maxpool2d(v)
            return float(np.sum(out * proj))

        _, idx = maxpool2d(x)
        gx = maxpool2d_backward(proj, idx)
        check_grad(f, x, gx)


class TestDeconv2d:
    def test_adjoint_identity(self, rng):
        spec = ConvSpec(3, 5, 4, 4, 2, 1)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal(spec.weight_shape())
        y = rng.standard_normal((2, 5, 4, 4))
        lhs = np.sum(conv2d_forward(x, w, np.zeros(5), spec) * y)
        rhs = np.sum(x * deconv2d(y, w, spec))
        assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))

    def test_single_pixel_stamp(self):
        spec = ConvSpec(1, 1, 2, 2, 2, 0)
        k = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        x = np.full((1, 1, 1, 1), 2.5)
        out = deconv2d(x, k, spec)
        np.testing.assert_allclose(out[0, 0], 2.5 * k[0, 0])

    def test_finite_differences(self, verification_mode, rng):
        spec = ConvSpec(2, 3, 4, 4, 2, 1)
        x = rng.standard_normal((1, 3, 3, 3))
        w = rng.standard_normal(spec.weight_shape()) * 0.5
        b = rng.standard_normal(2) * 0.2
        proj = rng.standard_normal(deconv2d(x, w, spec, b).shape)
        gx, gw, gb = deconv2d_backward(proj, x, w, spec)
        check_grad(lambda v: float(np.sum(deconv2d(v, w, spec, b) * proj)), x, gx)
        check_grad(lambda v: float(np.sum(deconv2d(x, v, spec, b) * proj)), w, gw)
        check_grad(lambda v: float(np.sum(deconv2d(x, w, spec, v) * proj)), b, gb)


class TestSoftmaxCE:
    def test_uniform_logits(self):
        logits = np.zeros((1, 3, 2, 2))
        target = np.zeros((1, 2, 2), dtype=np.int64)
        loss, _ = softmax_ce(logits, target)
        assert loss == pytest.approx(np.log(3.0), abs=1e-9)

    def test_confident_correct(self):
        logits = np.zeros((1, 3, 2, 2))
        logits[:, 1] = 20.0
        target = np.ones((1, 2, 2), dtype=np.int64)
        loss, _ = softmax_ce(logits, target)
        assert loss < 1e-8

    def test_shift_invariance(self, rng):
        logits = rng.standard_normal((2, 4, 3, 3))
        target = rng.integers(0, 4, (2, 3, 3))
        base, _ = softmax_ce(logits, target)
        shifted, _ = softmax_ce(logits + rng.standard_normal((2, 1, 3, 3)), target)
        assert shifted == pytest.approx(base, abs=1e-6)

    def test_masked_equals_submultiset(self, rng):
        logits = rng.standard_normal((1, 3, 4, 4))
        target = rng.integers(0, 3, (1, 4, 4))
        mask = rng.integers(0, 2, (1, 4, 4)).astype(np.uint8)
        mask[0, 0, 0] = 1
        masked, _ = softmax_ce(logits, target, mask)
        keep = mask[0].astype(bool)
        sub_logits = logits[0][:, keep].reshape(1, 3, -1, 1)
        sub_target = target[0][keep].reshape(1, -1, 1)
        manual, _ = softmax_ce(sub_logits, sub_target)
        assert masked == pytest.approx(manual, abs=1e-6)

    def test_ignore_label_excluded(self, rng):
        logits = rng.standard_normal((1, 3, 2, 2))
        target = np.array([[[0, IGNORE_LABEL], [1, 2]]], dtype=np.int64)
        loss, grad = softmax_ce(logits, target)
        assert grad[0, :, 0, 1] == pytest.approx(0.0)
        assert np.isfinite(loss)

    def test_empty_mask_raises(self, rng):
        with pytest.raises(ValueError, match="no included pixels"):
            softmax_ce(rng.standard_normal((1, 2, 2, 2)),
                       np.zeros((1, 2, 2), dtype=np.int64),
                       np.zeros((1, 2, 2), dtype=np.uint8))

    def test_out_of_range_class(self, rng):
        with pytest.raises(ValueError, match="class id"):
            softmax_ce(rng.standard_normal((1, 2, 2, 2)),
                       np.full((1, 2, 2), 7, dtype=np.int64))

    def test_finite_differences(self, verification_mode, rng):
        logits = rng.standard_normal((2, 3, 4, 4))
        target = rng.integers(0, 3, (2, 4, 4))
        mask = rng.integers(0, 2, (2, 4, 4)).astype(np.uint8)
        mask[:, 0, 0] = 1
        _, grad = softmax_ce(logits, target, mask)
        check_grad(lambda v: softmax_ce(v, target, mask)[0], logits, grad)


class TestSigmoidBCE:
    def test_zero_logit(self):
        loss, _ = sigmoid_bce(np.zeros((1, 1, 2, 2)), np.ones((1, 2, 2)))
        assert loss == pytest.approx(np.log(2.0), abs=1e-9)

    def test_confident_margin(self, rng):
        target = rng.integers(0, 2, (1, 4, 4)).astype(np.float64)
        logit = (target * 2 - 1)[None].transpose(1, 0, 2, 3) * 20.0
        loss, _ = sigmoid_bce(logit, target)
        assert loss < 1e-8

    def test_finite_differences(self, verification_mode, rng):
        logit = rng.standard_normal((2, 1, 3, 4))
        target = rng.integers(0, 2, (2, 3, 4)).astype(np.uint8)
        mask = np.ones((2, 3, 4), dtype=np.uint8)
        mask[0, 0] = 0
        _, grad = sigmoid_bce(logit, target, mask)
        check_grad(lambda v: sigmoid_bce(v, target, mask)[0], logit, grad)


class TestBilinearUpsample:
    def test_constant_preserved(self):
        x = np.full((1, 2, 3, 3), 7.0)
        np.testing.assert_allclose(bilinear_upsample(x, 2), 7.0)

    def test_adjoint_identity(self, rng):
        x = rng.standard_normal((1, 2, 4, 5))
        y = rng.standard_normal((1, 2, 8, 10))
        lhs = np.sum(bilinear_upsample(x, 2) * y)
        rhs = np.sum(x * bilinear_upsample_backward(y, 4, 5, 2))
        assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_finite_differences(self, verification_mode, rng):
        x = rng.standard_normal((1, 2, 3, 3))
        proj = rng.standard_normal((1, 2, 6, 6))
        analytic = bilinear_upsample_backward(proj, 3, 3, 2)
        check_grad(lambda v: float(np.sum(bilinear_upsample(v, 2) * proj)),
                   x, analytic)


class TestSGD:
    def test_plain_step_zeroes(self):
        p = np.array([1.0, -2.0])
        params = {"p": p.copy()}
        state = OptimState(learning_rate=1.0, momentum=0.0, weight_decay=0.0)
        sgd_step(params, {"p": p.copy()}, state)
        np.testing.assert_allclose(params["p"], 0.0)

    def test_zero_gradient_no_motion(self):
        params = {"p": np.array([1.0, 2.0])}
        state = OptimState(learning_rate=0.5, momentum=0.0, weight_decay=0.0)
        sgd_step(params, {"p": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["p"], [1.0, 2.0])

    def test_two_step_momentum_closed_form(self):
        # v1 = -lr*g1; p1 = p0 + v1
        # v2 = mu*v1 - lr*g2; p2 = p1 + v2
        lr, mu = 0.1, 0.9
        p0 = np.array([1.0])
        g1, g2 = np.array([0.3]), np.array([-0.2])
        params = {"p": p0.copy()}
        state = OptimState(learning_rate=lr, momentum=mu, weight_decay=0.0)
        sgd_step(params, {"p": g1}, state)
        sgd_step(params, {"p": g2}, state)
        v1 = -lr * g1
        expected = p0 + v1 + (mu * v1 - lr * g2)
        np.testing.assert_allclose(params["p"], expected, rtol=1e-12)

    def test_weight_decay(self):
        params = {"p": np.array([2.0])}
        state = OptimState(learning_rate=0.1, momentum=0.0, weight_decay=0.5)
        sgd_step(params, {"p": np.zeros(1)}, state)
        np.testing.assert_allclose(params["p"], 2.0 - 0.1 * 0.5 * 2.0)

    def test_transition_projection(self, rng):
        w = np.eye(3) * 5.0
        params = {"omega": w.copy()}
        state = OptimState(learning_rate=0.0, momentum=0.0, weight_decay=0.0)
        sgd_step(params, {"omega": np.zeros((3, 3))}, state,
                 transition_names={"omega"})
        assert np.linalg.svd(params["omega"], compute_uv=False)[0] <= 1.0 + 1e-6

    def test_shape_mismatch(self):
        state = OptimState()
        with pytest.raises(ValueError):
            sgd_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, state)


def test_glorot_uniform_bounds(rng):
    w = glorot_uniform((100, 100), 100, 100, rng, np.float64)
    limit = np.sqrt(6.0 / 200)
    assert np.abs(w).max() <= limit
    assert np.abs(w).max() > limit * 0.9
