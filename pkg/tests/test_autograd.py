import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from isonas import autograd as ag
from isonas.autograd import Tensor
from isonas.layers import (BNParams, LayerParams, Tape, backward_bn_only,
                           forward_block, jacobian_of, JacobianTooLargeError,
                           TapeError)

import oracles


def dense_params(w, frozen=True, name="dense"):
    w = np.asarray(w, dtype=np.float64)
    return LayerParams(weight=Tensor(w), bias=Tensor(np.zeros(w.shape[0])),
                       op="dense", frozen=frozen, name=name)


def conv_params(w, stride=1, frozen=True, name="conv"):
    w = np.asarray(w, dtype=np.float64)
    return LayerParams(weight=Tensor(w), bias=Tensor(np.zeros(w.shape[0])),
                       op="conv", stride=stride, frozen=frozen, name=name)


class TestForwardBlock:
    def test_identity_dense_passthrough(self):
        x = np.random.default_rng(0).standard_normal((3, 5))
        out = forward_block(Tensor(x), [dense_params(np.eye(5))], activation="identity")
        assert np.array_equal(out.data, x)

    def test_tanh_zero_weights_gives_zero(self):
        x = np.random.default_rng(1).standard_normal((2, 4))
        out = forward_block(Tensor(x), [dense_params(np.zeros((4, 4)))], activation="tanh")
        assert np.all(out.data == 0.0)

    def test_dense_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        # orthogonal from seed 0 via QR
        q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((3, 3)))
        x = np.zeros((1, 3))
        x[0, 0] = 1.0
        out = forward_block(Tensor(x), [dense_params(q)], activation="tanh")
        ref = np.tanh(oracles.dense_loop(x, q))
        assert np.allclose(out.data, ref, atol=1e-14)
        # tanh is a contraction: ||out|| <= ||Wx|| = 1
        assert np.linalg.norm(out.data) <= 1.0 + 1e-12
        _ = rng

    def test_shape_mismatch_raises(self):
        with pytest.raises(ag.DimensionError):
            forward_block(Tensor(np.ones((2, 3))), [dense_params(np.eye(4))])

    def test_nonfinite_names_layer(self):
        p = dense_params(np.full((3, 3), 1e308), name="exploder")
        with np.errstate(over="ignore"), pytest.raises(ag.NumericOverflowError, match="exploder"):
            forward_block(Tensor(np.full((2, 3), 1e9)), [p], activation="identity")


class TestConv2d:
    @pytest.mark.parametrize("kernel,stride,cyclic", [
        (3, 1, False), (3, 1, True), (5, 1, False), (5, 1, True),
        (3, 2, False), (2, 1, False), (4, 2, False), (3, 2, True),
    ])
    def test_matches_naive_loop(self, kernel, stride, cyclic):
        rng = np.random.default_rng(kernel * 10 + stride)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, kernel, kernel))
        out = ag.conv2d(Tensor(x), Tensor(w), stride=stride, cyclic=cyclic)
        ref = oracles.conv2d_loop(x, w, stride=stride, cyclic=cyclic)
        assert out.data.shape == ref.shape
        assert np.allclose(out.data, ref, atol=1e-12)

    @pytest.mark.parametrize("cyclic", [False, True])
    def test_input_gradient_matches_finite_differences(self, cyclic):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        lw = rng.standard_normal((1, 3, 5, 5))

        xt = Tensor(x.copy(), requires_grad=True)
        out = ag.conv2d(xt, Tensor(w), cyclic=cyclic)
        loss = ag.sum_(ag.mul(out, lw))
        loss.backward()

        def f():
            return float((oracles.conv2d_loop(x, w, cyclic=cyclic) * lw).sum())

        fd = oracles.central_difference(f, x)
        assert np.allclose(xt.grad, fd, rtol=1e-6, atol=1e-8)

    def test_weight_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 2, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3))
        lw = rng.standard_normal((2, 2, 3, 3))

        wt = Tensor(w.copy(), requires_grad=True)
        out = ag.conv2d(Tensor(x), wt, stride=2)
        loss = ag.sum_(ag.mul(out, lw))
        loss.backward()

        def f():
            return float((oracles.conv2d_loop(x, w, stride=2) * lw).sum())

        fd = oracles.central_difference(f, w)
        assert np.allclose(wt.grad, fd, rtol=1e-6, atol=1e-8)


class TestBatchNorm:
    def test_normalized_input_is_passthrough_up_to_eps(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((64, 3, 4, 4))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        p = BNParams.unit(3, eps=1e-5)
        out = forward_block(Tensor(x), [p], training=True)
        assert np.allclose(out.data, x / np.sqrt(1 + 1e-5), atol=1e-10)

    def test_zero_gamma_gives_beta(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((8, 2, 3, 3))
        p = BNParams(gamma=Tensor(np.zeros(2)), beta=Tensor(np.array([1.5, -0.5])))
        out = forward_block(Tensor(x), [p], training=True)
        assert np.allclose(out.data[:, 0], 1.5)
        assert np.allclose(out.data[:, 1], -0.5)

    def test_output_stats_match_loop_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((16, 3, 5, 5)) * 2.0 + 1.0
        gamma = np.array([1.0, 0.5, 2.0])
        beta = np.array([0.0, 1.0, -1.0])
        eps = 1e-3
        p = BNParams(gamma=Tensor(gamma), beta=Tensor(beta), eps=eps)
        out = forward_block(Tensor(x), [p], training=True)
        means, variances = oracles.channel_stats_loop(out.data)
        _, in_var = oracles.channel_stats_loop(x)
        assert np.allclose(means, beta, atol=1e-10)
        assert np.allclose(variances, gamma ** 2 * in_var / (in_var + eps), atol=1e-8)

    def test_batch_of_one_raises_in_training(self):
        p = BNParams.unit(2)
        with pytest.raises(ag.DimensionError):
            forward_block(Tensor(np.ones((1, 2, 3, 3))), [p], training=True)

    def test_running_stats_update_with_momentum(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((32, 2, 4, 4)) + 3.0
        p = BNParams.unit(2)
        forward_block(Tensor(x), [p], training=True)
        mu = x.mean(axis=(0, 2, 3))
        assert np.allclose(p.running_mean, 0.9 * 0.0 + 0.1 * mu)

    def test_eval_mode_uses_running_stats(self):
        p = BNParams.unit(2)
        p.running_mean[:] = [1.0, -1.0]
        p.running_var[:] = [4.0, 0.25]
        x = np.ones((2, 2, 2, 2))
        out = forward_block(Tensor(x), [p], training=False)
        expect_c0 = (1.0 - 1.0) / np.sqrt(4.0 + p.eps)
        expect_c1 = (1.0 + 1.0) / np.sqrt(0.25 + p.eps)
        assert np.allclose(out.data[:, 0], expect_c0)
        assert np.allclose(out.data[:, 1], expect_c1)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10 ** 6), st.floats(0.2, 3.0), st.floats(-2.0, 2.0))
    def test_training_stats_property(self, seed, gamma_val, beta_val):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((8, 2, 3, 3)) * rng.uniform(0.5, 2.0) + rng.uniform(-1, 1)
        eps = 1e-5
        p = BNParams(gamma=Tensor(np.full(2, gamma_val)), beta=Tensor(np.full(2, beta_val)),
                     eps=eps)
        out = forward_block(Tensor(x), [p], training=True)
        v = x.var(axis=(0, 2, 3))
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), beta_val, atol=1e-9)
        assert np.allclose(out.data.var(axis=(0, 2, 3)),
                           gamma_val ** 2 * v / (v + eps), atol=1e-7)


class TestBackwardBnOnly:
    def _two_block_net(self, seed, train_bn=True):
        rng = np.random.default_rng(seed)
        conv = conv_params(rng.standard_normal((3, 2, 3, 3)) * 0.5, name="c0")
        bn1 = BNParams.unit(3, trainable=train_bn, name="bn1")
        dense_in = 3
        bn2 = BNParams.unit(3, trainable=train_bn, name="bn2")
        params = [conv, bn1, bn2]
        x = rng.standard_normal((4, 2, 5, 5))
        lw = rng.standard_normal((4, 3, 5, 5))
        _ = dense_in
        return params, x, lw

    def test_zero_upstream_gives_zero_grads(self):
        params, x, _ = self._two_block_net(0)
        tape = Tape()
        out = forward_block(Tensor(x), params, training=True, tape=tape)
        grads = backward_bn_only(tape, np.zeros(out.shape))
        assert set(grads) == {"bn1", "bn2"}
        for ggamma, gbeta in grads.values():
            assert np.all(ggamma == 0.0)
            assert np.all(gbeta == 0.0)

    def test_sum_loss_beta_grad_counts_elements(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 3, 5, 5))
        p = BNParams.unit(3, name="only")
        tape = Tape()
        forward_block(Tensor(x), [p], training=True, tape=tape)
        grads = backward_bn_only(tape, np.ones((4, 3, 5, 5)))
        assert np.allclose(grads["only"][1], 4 * 5 * 5)

    def test_empty_tape_raises(self):
        with pytest.raises(TapeError):
            backward_bn_only(Tape(), 1.0)

    def test_frozen_weights_get_no_gradient_buffers(self):
        params, x, lw = self._two_block_net(2)
        tape = Tape()
        forward_block(Tensor(x), params, training=True, tape=tape)
        backward_bn_only(tape, lw)
        conv = params[0]
        assert conv.weight.grad is None
        assert conv.bias.grad is None

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gamma_beta_grads_match_finite_differences(self, seed):
        params, x, lw = self._two_block_net(seed)
        conv, bn1, bn2 = params
        tape = Tape()
        out = forward_block(Tensor(x), params, training=True, tape=tape)
        grads = backward_bn_only(tape, lw)

        for p in (bn1, bn2):
            def loss():
                o = forward_block(Tensor(x), params, training=True, update_stats=False)
                return float((o.data * lw).sum())

            fd_gamma = oracles.central_difference(loss, p.gamma.data)
            fd_beta = oracles.central_difference(loss, p.beta.data)
            ggamma, gbeta = grads[p.name]
            assert np.allclose(ggamma, fd_gamma, rtol=1e-4, atol=1e-7)
            assert np.allclose(gbeta, fd_beta, rtol=1e-4, atol=1e-7)
        _ = out, conv


class TestJacobian:
    def test_identity_block(self):
        j = jacobian_of(lambda t: t, np.random.default_rng(0).standard_normal(6))
        assert np.array_equal(j, np.eye(6))

    def test_linear_block_returns_weight_matrix(self):
        w = np.random.default_rng(1).standard_normal((4, 4))
        p = dense_params(w)
        j = jacobian_of(lambda t: forward_block(t, [p], activation="identity"),
                        np.zeros(4))
        assert np.allclose(j, w, atol=1e-14)

    def test_tanh_block_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((5, 5)) * 0.7
        p = dense_params(w)
        x = rng.standard_normal(5)

        def block(t):
            return forward_block(t, [p], activation="tanh")

        j = jacobian_of(block, x)
        h = 1e-6
        fd = np.zeros((5, 5))
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            fp = np.tanh((x + e) @ w.T)
            fm = np.tanh((x - e) @ w.T)
            fd[:, i] = (fp - fm) / (2 * h)
        assert np.allclose(j, fd, atol=1e-6)

    def test_conv_block_jacobian_matches_fd(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((2, 2, 3, 3)) * 0.3
        p = conv_params(w)
        x = rng.standard_normal((2, 4, 4))

        def block(t):
            return forward_block(t, [p], activation="tanh", cyclic=True)

        j = jacobian_of(block, x)
        h = 1e-6
        for probe in range(0, 32, 7):
            e = np.zeros(32)
            e[probe] = h
            fp = np.tanh(oracles.conv2d_loop((x + e.reshape(x.shape))[None], w, cyclic=True))
            fm = np.tanh(oracles.conv2d_loop((x - e.reshape(x.shape))[None], w, cyclic=True))
            assert np.allclose(j[:, probe], ((fp - fm) / (2 * h)).reshape(-1), atol=1e-6)

    def test_dimension_cap(self):
        with pytest.raises(JacobianTooLargeError, match="stochastic trace"):
            jacobian_of(lambda t: t, np.zeros(5000))


class TestDeterminismAndMisc:
    def test_bit_identical_for_same_seed(self):
        def run():
            rng = np.random.default_rng(42)
            x = rng.standard_normal((2, 3, 6, 6))
            w = rng.standard_normal((3, 3, 3, 3))
            p = conv_params(w)
            bn = BNParams.unit(3)
            out = forward_block(Tensor(x), [p, bn], training=True)
            return out.data.copy()

        assert np.array_equal(run(), run())

    def test_cross_entropy_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        logits = rng.standard_normal((5, 4))
        labels = rng.integers(0, 4, size=5)
        t = Tensor(logits.copy(), requires_grad=True)
        loss = ag.cross_entropy(t, labels)
        loss.backward()

        def f():
            z = logits - logits.max(axis=1, keepdims=True)
            lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return float(-lp[np.arange(5), labels].mean())

        fd = oracles.central_difference(f, logits)
        assert np.allclose(t.grad, fd, rtol=1e-6, atol=1e-9)

    def test_space_to_depth_roundtrip_gradient(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((2, 3, 4, 4))
        t = Tensor(x, requires_grad=True)
        out = ag.space_to_depth(t)
        assert out.shape == (2, 12, 2, 2)
        out.backward(np.ones(out.shape))
        assert np.array_equal(t.grad, np.ones(x.shape))

    def test_residual_add_backward(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
        y = ag.add(x, ag.tanh(x))
        y.backward(np.ones((2, 3)))
        assert np.allclose(x.grad, 1.0 + (1.0 - np.tanh(x.data) ** 2))

    def test_global_avg_pool(self):
        x = Tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4), requires_grad=True)
        out = ag.global_avg_pool(x)
        assert np.allclose(out.data, 7.5)
        out.backward(np.ones((1, 1)))
        assert np.allclose(x.grad, 1.0 / 16)
