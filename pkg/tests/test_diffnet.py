"""Finite-difference and reimplementation oracles for the MLP core."""

import math

import numpy as np
import pytest

from kincatch.diffnet import (
    GradientRecord, Mlp, MomentumOptimizer, forward_batch, input_jacobian,
    jvp_forward_batch, mlp_init, net_eval, net_input_grad, net_input_jvp,
    net_jvp_grads, net_param_grad,
)


def random_net(sizes, seed):
    return mlp_init(sizes, np.random.default_rng(seed))


def straight_line_eval(net, x):
    """Independent loop-based reimplementation of the forward pass."""
    h = list(map(float, x))
    L = net.n_layers
    for l in range(L):
        W, b = net.weights[l], net.biases[l]
        a = [sum(W[i, j] * h[j] for j in range(W.shape[1])) + b[i]
             for i in range(W.shape[0])]
        h = a if l == L - 1 else [math.tanh(v) for v in a]
    return np.array(h)


class TestEval:
    def test_zero_weights_bias_out(self):
        net = random_net([4, 8, 3], 0)
        for W in net.weights:
            W[...] = 0.0
        net.biases[0][...] = np.arange(8)
        net.biases[1][...] = [1.5, -2.0, 0.25]
        assert np.array_equal(net_eval(net, np.ones(4)), [1.5, -2.0, 0.25])

    def test_single_linear_layer(self):
        rng = np.random.default_rng(1)
        W = rng.normal(size=(3, 5))
        b = rng.normal(size=3)
        net = Mlp([W.copy()], [b.copy()])
        x = rng.normal(size=5)
        assert np.allclose(net_eval(net, x), W @ x + b, atol=1e-15)

    def test_matches_straight_line(self):
        for seed in range(5):
            net = random_net([6, 16, 12, 4], seed)
            x = np.random.default_rng(100 + seed).normal(size=6)
            assert np.allclose(net_eval(net, x), straight_line_eval(net, x),
                               atol=1e-12)

    def test_dimension_mismatch(self):
        net = random_net([4, 8, 3], 2)
        with pytest.raises(ValueError):
            net_eval(net, np.ones(5))


def flat_grads(rec: GradientRecord) -> np.ndarray:
    return np.concatenate([a.ravel() for a in rec.arrays()])


class TestParamGrad:
    def test_zero_adjoint(self):
        net = random_net([3, 10, 2], 3)
        rec = net_param_grad(net, np.ones(3), np.zeros(2))
        assert np.all(flat_grads(rec) == 0.0)

    def test_finite_difference(self):
        h = 1e-5
        rng = np.random.default_rng(0)
        for seed in range(20):
            net = random_net([4, 9, 7, 3], 200 + seed)
            x = rng.normal(size=4)
            c = rng.normal(size=3)
            rec = flat_grads(net_param_grad(net, x, c))
            flat = net.flat_parameters()
            # probe a deterministic subset of coordinates
            idx = rng.choice(flat.size, size=25, replace=False)
            for i in idx:
                fp = flat.copy()
                fp[i] += h
                net.set_flat_parameters(fp)
                up = float(c @ net_eval(net, x))
                fp[i] -= 2 * h
                net.set_flat_parameters(fp)
                dn = float(c @ net_eval(net, x))
                net.set_flat_parameters(flat)
                fd = (up - dn) / (2 * h)
                assert rec[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_linearity_in_adjoint(self):
        net = random_net([5, 8, 4], 9)
        rng = np.random.default_rng(10)
        x = rng.normal(size=5)
        c1 = rng.normal(size=4)
        c2 = rng.normal(size=4)
        g1 = flat_grads(net_param_grad(net, x, c1))
        g2 = flat_grads(net_param_grad(net, x, c2))
        g12 = flat_grads(net_param_grad(net, x, c1 + c2))
        assert np.allclose(g12, g1 + g2, atol=1e-12)


class TestJvp:
    def test_linear_net(self):
        rng = np.random.default_rng(11)
        W = rng.normal(size=(4, 6))
        net = Mlp([W.copy()], [rng.normal(size=4)])
        v = rng.normal(size=6)
        assert np.allclose(net_input_jvp(net, rng.normal(size=6), v), W @ v,
                           atol=1e-15)

    def test_finite_difference(self):
        h = 1e-5
        rng = np.random.default_rng(12)
        for seed in range(10):
            net = random_net([5, 12, 8, 3], 300 + seed)
            x = rng.normal(size=5)
            v = rng.normal(size=5)
            jvp = net_input_jvp(net, x, v)
            fd = (net_eval(net, x + h * v) - net_eval(net, x - h * v)) / (2 * h)
            assert np.allclose(jvp, fd, atol=1e-6)

    def test_linearity(self):
        net = random_net([4, 9, 2], 13)
        rng = np.random.default_rng(14)
        x = rng.normal(size=4)
        v1 = rng.normal(size=4)
        v2 = rng.normal(size=4)
        lhs = net_input_jvp(net, x, 2.0 * v1 - 3.0 * v2)
        rhs = 2.0 * net_input_jvp(net, x, v1) - 3.0 * net_input_jvp(net, x, v2)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_reverse_forward_agreement(self):
        rng = np.random.default_rng(15)
        for seed in range(10):
            net = random_net([6, 10, 5], 400 + seed)
            x = rng.normal(size=6)
            v = rng.normal(size=6)
            c = rng.normal(size=5)
            lhs = float(c @ net_input_jvp(net, x, v))
            rhs = float(v @ net_input_grad(net, x, c))
            assert lhs == pytest.approx(rhs, abs=1e-10)

    def test_dense_jacobian(self):
        net = random_net([4, 8, 3], 16)
        rng = np.random.default_rng(17)
        x = rng.normal(size=4)
        J = input_jacobian(net, x)
        h = 1e-6
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd = (net_eval(net, x + e) - net_eval(net, x - e)) / (2 * h)
            assert np.allclose(J[:, j], fd, atol=1e-6)


class TestJvpGrads:
    """Reverse differentiation through the JVP graph (second-order paths)."""

    def phi(self, net, x, v, c):
        return float(c @ net_input_jvp(net, x, v))

    def test_param_grad_finite_difference(self):
        h = 1e-5
        rng = np.random.default_rng(18)
        net = random_net([4, 8, 6, 3], 500)
        x = rng.normal(size=4)
        v = rng.normal(size=4)
        c = rng.normal(size=3)
        rec, gx, gv = net_jvp_grads(net, x, v, c)
        rec = flat_grads(rec)
        flat = net.flat_parameters()
        idx = rng.choice(flat.size, size=30, replace=False)
        for i in idx:
            fp = flat.copy()
            fp[i] += h
            net.set_flat_parameters(fp)
            up = self.phi(net, x, v, c)
            fp[i] -= 2 * h
            net.set_flat_parameters(fp)
            dn = self.phi(net, x, v, c)
            net.set_flat_parameters(flat)
            fd = (up - dn) / (2 * h)
            assert rec[i] == pytest.approx(fd, rel=2e-5, abs=1e-6)

    def test_input_and_direction_grads(self):
        h = 1e-6
        rng = np.random.default_rng(19)
        net = random_net([5, 9, 4], 501)
        x = rng.normal(size=5)
        v = rng.normal(size=5)
        c = rng.normal(size=4)
        _, gx, gv = net_jvp_grads(net, x, v, c)
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            fd_x = (self.phi(net, x + e, v, c) - self.phi(net, x - e, v, c)) / (2 * h)
            fd_v = (self.phi(net, x, v + e, c) - self.phi(net, x, v - e, c)) / (2 * h)
            assert gx[j] == pytest.approx(fd_x, rel=1e-4, abs=1e-7)
            assert gv[j] == pytest.approx(fd_v, rel=1e-4, abs=1e-7)

    def test_primal_adjoint_path(self):
        # with a primal adjoint as well, the record must add the plain
        # reverse-mode gradient
        rng = np.random.default_rng(20)
        net = random_net([4, 7, 3], 502)
        x = rng.normal(size=4)
        v = rng.normal(size=4)
        c = rng.normal(size=3)
        e = rng.normal(size=3)
        combined = flat_grads(net_jvp_grads(net, x, v, c, e)[0])
        tangent_only = flat_grads(net_jvp_grads(net, x, v, c)[0])
        primal_only = flat_grads(net_param_grad(net, x, e))
        assert np.allclose(combined, tangent_only + primal_only, atol=1e-12)


class TestInitAndOptim:
    def test_preactivation_scale(self):
        rng = np.random.default_rng(21)
        net = random_net([32, 64, 64, 8], 600)
        X = rng.normal(size=(2000, 32))
        A1 = X @ net.weights[0].T + net.biases[0]
        assert 0.5 <= float(A1.std()) <= 1.5

    def test_deterministic_init(self):
        a = mlp_init([4, 8, 2], np.random.default_rng(7))
        b = mlp_init([4, 8, 2], np.random.default_rng(7))
        for Wa, Wb in zip(a.weights, b.weights):
            assert np.array_equal(Wa, Wb)

    def test_momentum_converges_on_quadratic(self):
        rng = np.random.default_rng(22)
        target = rng.normal(size=6)
        p = [np.zeros(6)]
        opt = MomentumOptimizer(p, lr=0.05, momentum=0.9)
        for _ in range(400):
            opt.step([p[0] - target])
        assert np.allclose(p[0], target, atol=1e-8)

    def test_batched_forward_matches_single(self):
        net = random_net([5, 9, 3], 23)
        rng = np.random.default_rng(24)
        X = rng.normal(size=(7, 5))
        Y, _ = forward_batch(net, X)
        for i in range(7):
            assert np.allclose(Y[i], net_eval(net, X[i]), atol=1e-14)

    def test_jvp_batch_consistency(self):
        net = random_net([5, 9, 3], 25)
        rng = np.random.default_rng(26)
        X = rng.normal(size=(6, 5))
        V = rng.normal(size=(6, 5))
        _, Yd, _ = jvp_forward_batch(net, X, V)
        for i in range(6):
            assert np.allclose(Yd[i], net_input_jvp(net, X[i], V[i]), atol=1e-14)
