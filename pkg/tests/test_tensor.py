"""Autodiff engine: per-op gradient checks against central finite differences,
broadcasting reductions, and optimizer / schedule arithmetic."""

import numpy as np
import pytest

from fgmae import tensor as T
from fgmae.tensor import Tensor
from fgmae import optim as O


def _fd_check(f, x, tol=1e-4):
    err = T.grad_check(f, x)
    assert err < tol, f"finite-difference mismatch: {err}"


def _rand(shape, seed):
    gen = np.random.default_rng(seed)
    return Tensor(gen.standard_normal(shape), requires_grad=True, dtype=np.float64)


class TestOps:
    def test_add_broadcast(self):
        x = _rand((3, 4), 0)
        w = np.arange(4.0)
        _fd_check(lambda t: T.tsum((t + Tensor(w)) * Tensor(w + 1.0)), x)

    def test_mul_div(self):
        x = _rand((5,), 1)
        y = np.linspace(1.0, 2.0, 5)
        _fd_check(lambda t: T.tsum(t * Tensor(y) / (t * t + 2.0)), x)

    def test_power_exp_log(self):
        x = Tensor(np.array([0.5, 1.5, 2.5]), requires_grad=True, dtype=np.float64)
        _fd_check(lambda t: T.tsum(t ** 3), x)
        _fd_check(lambda t: T.tsum(T.exp(t * 0.3)), x)
        _fd_check(lambda t: T.tsum(T.log(t + 1.0)), x)

    def test_gelu(self):
        x = _rand((7,), 2)
        _fd_check(lambda t: T.tsum(T.gelu(t)), x)

    def test_gelu_values(self):
        # exact Gaussian CDF form: gelu(0)=0, gelu is odd-symmetric minus x/2 shift
        g = T.gelu(Tensor(np.array([0.0]))).data
        assert g[0] == 0.0
        big = T.gelu(Tensor(np.array([10.0]))).data
        np.testing.assert_allclose(big, 10.0, rtol=1e-12)

    def test_matmul_2d(self):
        x = _rand((3, 4), 3)
        w = np.random.default_rng(4).standard_normal((4, 2))
        _fd_check(lambda t: T.tsum(T.matmul(t, Tensor(w))), x)

    def test_matmul_batched_broadcast(self):
        x = _rand((2, 3, 4), 5)
        w = _rand((4, 5), 6)
        _fd_check(lambda t: T.tsum(T.matmul(t, w)), x)
        _fd_check(lambda t: T.tsum(T.matmul(x, t)), w)

    def test_reshape_transpose_swapaxes(self):
        x = _rand((2, 3, 4), 7)
        scale = np.arange(24.0).reshape(4, 3, 2)
        _fd_check(lambda t: T.tsum(T.transpose(t) * Tensor(scale)), x)
        _fd_check(lambda t: T.tsum(T.reshape(t, 6, 4) ** 2), x)
        _fd_check(lambda t: T.tsum(T.swapaxes(t, 0, 2) * Tensor(scale)), x)

    def test_concatenate(self):
        x = _rand((2, 3), 8)
        y = np.ones((2, 2))
        _fd_check(lambda t: T.tsum(T.concatenate([t, Tensor(y)], axis=1) ** 2), x)

    def test_gather_tokens(self):
        x = _rand((2, 5, 3), 9)
        idx = np.array([[4, 0, 0], [1, 2, 3]])
        _fd_check(lambda t: T.tsum(T.gather_tokens(t, idx) ** 2), x)

    def test_sum_mean_axes(self):
        x = _rand((3, 4), 10)
        _fd_check(lambda t: T.tsum(T.tsum(t, axis=0) ** 2), x)
        _fd_check(lambda t: T.tsum(T.tmean(t, axis=1, keepdims=True) * t), x)

    def test_softmax(self):
        x = _rand((4, 6), 11)
        w = np.random.default_rng(12).standard_normal((4, 6))
        _fd_check(lambda t: T.tsum(T.softmax(t) * Tensor(w)), x)

    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(13).standard_normal((5, 9)) * 10)
        rows = T.softmax(x).data.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-6)

    def test_softmax_shift_invariance(self):
        x = np.random.default_rng(14).standard_normal((3, 5))
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 100.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_layer_norm(self):
        x = _rand((3, 8), 15)
        g = _rand((8,), 16)
        b = _rand((8,), 17)
        w = np.random.default_rng(18).standard_normal((3, 8))
        _fd_check(lambda t: T.tsum(T.layer_norm(t, g, b) * Tensor(w)), x)
        _fd_check(lambda t: T.tsum(T.layer_norm(x, t, b) * Tensor(w)), g)
        _fd_check(lambda t: T.tsum(T.layer_norm(x, g, t) * Tensor(w)), b)

    def test_layer_norm_statistics(self):
        x = Tensor(np.random.default_rng(19).standard_normal((6, 16)) * 3 + 2)
        ones = Tensor(np.ones(16))
        zeros = Tensor(np.zeros(16))
        out = T.layer_norm(x, ones, zeros).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)

    def test_layer_norm_constant_row(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_log_softmax_softplus_sigmoid(self):
        x = _rand((3, 4), 20)
        w = np.random.default_rng(21).standard_normal((3, 4))
        _fd_check(lambda t: T.tsum(T.log_softmax(t) * Tensor(w)), x)
        _fd_check(lambda t: T.tsum(T.softplus(t)), x)
        _fd_check(lambda t: T.tsum(T.sigmoid(t) * Tensor(w)), x)

    def test_softplus_large_inputs_stable(self):
        out = T.softplus(Tensor(np.array([800.0, -800.0]))).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out[0], 800.0)
        np.testing.assert_allclose(out[1], 0.0, atol=1e-12)


class TestBackward:
    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
        y = x * x + x * 3.0
        y.backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_grad_without_flag(self):
        x = Tensor(np.array([1.0, 2.0]))
        y = T.tsum(x * 2.0)
        y.backward()
        assert x.grad is None

    def test_unbroadcast_sums_over_expanded_axes(self):
        b = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
        x = Tensor(np.ones((4, 3)))
        T.tsum(x + b).backward()
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_diamond_graph(self):
        x = Tensor(np.array([1.5]), requires_grad=True, dtype=np.float64)
        a = x * 2.0
        b = x * 3.0
        (a * b).backward()
        np.testing.assert_allclose(x.grad, [2 * 6 * 1.5])  # d/dx 6x^2

    def test_deep_chain_iterative(self):
        # would overflow a recursive backward
        x = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        y = x
        for _ in range(5000):
            y = y + 1.0
        y.backward()
        np.testing.assert_allclose(x.grad, [1.0])


class TestUtilities:
    def test_global_norm_and_clip(self):
        a = Tensor(np.zeros(3), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        a.grad = np.array([3.0, 0.0, 0.0])
        b.grad = np.array([4.0, 0.0, 0.0, 0.0])
        params = {"a": a, "b": b}
        np.testing.assert_allclose(T.global_grad_norm(params), 5.0)
        T.clip_global_norm(params, 1.0)
        np.testing.assert_allclose(T.global_grad_norm(params), 1.0, rtol=1e-6)
        np.testing.assert_allclose(a.grad[0], 0.6, rtol=1e-6)

    def test_clip_below_threshold_is_identity(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([0.1, 0.2])
        T.clip_global_norm({"a": a}, 10.0)
        np.testing.assert_allclose(a.grad, [0.1, 0.2])


class TestOptim:
    def test_adamw_hand_example(self):
        # one step from theta=1, g=0.5, lr=0.1, wd=0.05 lands on 0.895
        p = {"w": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)}
        g = {"w": np.array([0.5])}
        st = O.OptimState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8,
                          weight_decay=0.05)
        O.adamw_step(p, g, st)
        np.testing.assert_allclose(p["w"].data, [0.895], atol=1e-6)

    def test_adamw_decoupled_decay_skips_exempt(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64),
             "n": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)}
        g = {"w": np.array([0.0]), "n": np.array([0.0])}
        st = O.OptimState(lr=0.1, weight_decay=0.5)
        st.no_decay = {"n"}
        O.adamw_step(p, g, st)
        assert p["w"].data[0] < 1.0         # decayed
        np.testing.assert_allclose(p["n"].data, [1.0])

    def test_adamw_rejects_nonfinite(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)}
        g = {"w": np.array([np.nan])}
        with pytest.raises(FloatingPointError):
            O.adamw_step(p, g, O.OptimState())

    def test_adamw_lr_scale(self):
        mk = lambda: {"a": Tensor(np.array([0.0]), requires_grad=True,
                                  dtype=np.float64)}
        g = {"a": np.array([1.0])}
        p_full, p_half = mk(), mk()
        st1 = O.OptimState(lr=0.1, weight_decay=0.0)
        st2 = O.OptimState(lr=0.1, weight_decay=0.0)
        st2.lr_scale = {"a": 0.5}
        O.adamw_step(p_full, g, st1)
        O.adamw_step(p_half, g, st2)
        np.testing.assert_allclose(p_half["a"].data, p_full["a"].data * 0.5,
                                   rtol=1e-12)

    def test_sgd_step(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)}
        O.sgd_step(p, {"w": np.array([0.5])}, lr=0.1)
        np.testing.assert_allclose(p["w"].data, [0.95])

    def test_schedule_warmup_and_cosine(self):
        s = O.LrSchedule(base_lr=1.5e-4, min_lr=0.0, warmup_steps=100,
                         total_steps=500)
        np.testing.assert_allclose(O.lr_at(0, s), 0.0)
        np.testing.assert_allclose(O.lr_at(50, s), 0.75e-4)
        np.testing.assert_allclose(O.lr_at(100, s), 1.5e-4)
        # cosine midpoint between warmup end and total
        np.testing.assert_allclose(O.lr_at(300, s), 7.5e-5)
        np.testing.assert_allclose(O.lr_at(500, s), 0.0, atol=1e-18)

    def test_schedule_min_lr_floor(self):
        s = O.LrSchedule(base_lr=1e-3, min_lr=1e-5, warmup_steps=0,
                         total_steps=100)
        np.testing.assert_allclose(O.lr_at(100, s), 1e-5)
