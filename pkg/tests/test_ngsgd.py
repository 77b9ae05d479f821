import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfmmi.ngsgd import (AdamState, LrSchedule, NgState, Optimizer, adam_step, lr_at,
                         ng_affine_update, ng_precondition, sgd_step)
from lfmmi.nnet import build_tdnn


def fro(a):
    return float(np.linalg.norm(a))


class TestPrecondition:
    def test_zero_unchanged(self):
        x = np.zeros((5, 4))
        out, st_ = ng_precondition(NgState(4), x)
        np.testing.assert_array_equal(out, x)
        assert st_.frames_seen == 5

    def test_identity_limit(self):
        x = np.random.default_rng(0).standard_normal((6, 4))
        out, _ = ng_precondition(NgState(4, alpha=1e9), x)
        np.testing.assert_allclose(out, x, rtol=1e-4, atol=1e-4 * fro(x))

    def test_norm_and_direction(self):
        x = np.random.default_rng(1).standard_normal((10, 4)) * [1, 10, 0.1, 3]
        out, _ = ng_precondition(NgState(4), x)
        assert fro(out) == pytest.approx(fro(x), abs=1e-6)
        assert np.sum(x * out) > 0
        assert not np.allclose(out, x)

    def test_input_state_untouched(self):
        s = NgState(3)
        ng_precondition(s, np.ones((2, 3)))
        assert s.frames_seen == 0 and not s.cov.any()

    def test_covariance_ema_converges(self):
        x = np.random.default_rng(2).standard_normal((100, 3))
        target = x.T @ x / 100
        s = NgState(3, num_samples_history=1000)
        errs = []
        for _ in range(60):
            _, s = ng_precondition(s, x)
            errs.append(np.abs(s.cov - target).max())
        # rho = 0.9 each time: error shrinks by exactly that factor
        assert errs[-1] < 1e-2 * errs[0]
        np.testing.assert_allclose(np.array(errs[1:]) / errs[:-1], 0.9, rtol=1e-6)

    def test_rho_clamped(self):
        x = np.random.default_rng(3).standard_normal((50, 2))
        _, s = ng_precondition(NgState(2, num_samples_history=10, cov=np.eye(2) * 100), x)
        np.testing.assert_allclose(s.cov, x.T @ x / 50)

    def test_bad_dim(self):
        with pytest.raises(ValueError):
            ng_precondition(NgState(3), np.ones((2, 4)))
        with pytest.raises(ValueError):
            NgState(3, alpha=0.0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 6),
           st.floats(1e-3, 1e3), st.floats(0.1, 100))
    def test_properties(self, seed, n, d, scale, alpha):
        rng = np.random.default_rng(seed)
        s = NgState(d, alpha=alpha)
        for _ in range(3):
            x = scale * rng.standard_normal((n, d))
            out, s = ng_precondition(s, x)
            assert fro(out) == pytest.approx(fro(x), rel=1e-6)
            assert np.sum(x * out) > 0
            np.testing.assert_allclose(s.cov, s.cov.T, atol=1e-6 * scale**2)
            assert np.linalg.eigvalsh(s.cov).min() > -1e-9 * scale**2


class TestAffineUpdate:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.params = {"W": rng.standard_normal((2, 3)), "b": rng.standard_normal(2)}
        self.A = rng.standard_normal((7, 3))
        self.B = rng.standard_normal((7, 2))

    def plain(self, lr):
        A1 = np.hstack([self.A, np.ones((7, 1))])
        return -lr * self.B.T @ A1 / 7

    def delta(self, new):
        return np.hstack([new["W"] - self.params["W"], (new["b"] - self.params["b"])[:, None]])

    def test_identity_limit(self):
        new, _ = ng_affine_update(self.params, self.A, self.B, (NgState(4, alpha=1e9), NgState(2, alpha=1e9)), 0.1)
        np.testing.assert_allclose(self.delta(new), self.plain(0.1), rtol=1e-4)
        sgd = sgd_step(self.params, {"W": -self.plain(0.1)[:, :3] / 0.1, "b": -self.plain(0.1)[:, 3] / 0.1}, 0.1)
        np.testing.assert_allclose(new["W"], sgd["W"], rtol=1e-4)

    def test_lr_zero(self):
        new, states = ng_affine_update(self.params, self.A, self.B, (NgState(4), NgState(2)), 0.0)
        np.testing.assert_array_equal(new["W"], self.params["W"])
        np.testing.assert_array_equal(new["b"], self.params["b"])
        assert states[0].frames_seen == 7

    def test_descent_direction(self):
        new, _ = ng_affine_update(self.params, self.A, self.B, (NgState(4), NgState(2)), 0.1)
        assert np.sum(self.delta(new) * self.plain(0.1)) > 0

    def test_no_bias(self):
        p = {"W": self.params["W"]}
        new, (si, _) = ng_affine_update(p, self.A, self.B, (NgState(3, alpha=1e9), NgState(2, alpha=1e9)),
                                        0.1, has_bias=False)
        assert si.dim == 3 and "b" not in new
        np.testing.assert_allclose(new["W"] - p["W"], -0.1 * self.B.T @ self.A / 7, rtol=1e-4)


class TestSchedule:
    def test_endpoints(self):
        s = LrSchedule(1e-3, 1e-5, 100)
        assert lr_at(s, 0) == 1e-3
        assert lr_at(s, 100) == 1e-5
        assert lr_at(s, 50) == pytest.approx(1e-4, rel=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-6, 1.0), st.floats(1e-4, 1.0), st.integers(1, 500))
    def test_log_linear_monotone(self, lr0, ratio, total):
        s = LrSchedule(lr0, lr0 * ratio, total)
        vals = np.log([lr_at(s, i) for i in range(total + 1)])
        assert np.all(np.diff(vals) <= 1e-12)
        np.testing.assert_allclose(vals, np.linspace(math.log(lr0), math.log(lr0 * ratio), total + 1),
                                   atol=1e-9)

    def test_invalid(self):
        with pytest.raises(ValueError):
            LrSchedule(1e-5, 1e-3, 10)
        with pytest.raises(ValueError):
            lr_at(LrSchedule(1e-3, 1e-5, 10), 11)


class TestSgdAdam:
    def test_sgd(self):
        assert sgd_step(1.0, 2.0, 0.1) == pytest.approx(0.8)
        p = {"w": np.array([1.0])}
        assert sgd_step(p, {"w": np.array([2.0])}, 0.0)["w"][0] == 1.0

    def test_adam_first_step_is_sign(self):
        st_ = AdamState(step=1)
        out = adam_step({"w": np.array([1.0, 1.0])}, {"w": np.array([3.0, -0.01])}, 0.1, st_)
        np.testing.assert_allclose(out["w"], [0.9, 1.1], rtol=1e-6)


@pytest.mark.parametrize("kind", Optimizer.KINDS)
def test_optimizer_reduces_loss(kind):
    rng = np.random.default_rng(5)
    net = build_tdnn(3, 2, hidden=(6,), bottleneck=None, seed=1)
    x = rng.standard_normal((2, 20, 3))
    target = rng.standard_normal((2, 18, 2))
    opt = Optimizer(kind)

    def loss():
        d = net.forward(x).output - target
        return 0.5 * float(np.sum(d * d)), d

    first = loss()[0]
    for _ in range(40):
        fwd = net.forward(x)
        bwd = net.backward(fwd, fwd.output - target, keep_factors=opt.needs_factors)
        opt.step(net, bwd, 0.01 if kind == "adam" else 1e-3)
    assert loss()[0] < 0.9 * first
    if kind == "ngsgd":
        assert "0.W" in opt.ng_states


def test_optimizer_unknown():
    with pytest.raises(ValueError):
        Optimizer("lbfgs")
