import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from miru.cells import CoeffSpec
from miru.network import ModelConfig, init_model
from miru.numerics import ContractError, Rng
from miru.optim import SGD, Adam, NonFiniteGradient, RMSProp, make_optimizer


class TestUpdateRules:
    def test_sgd_definition(self):
        theta = np.array([1.0])
        SGD(lr=0.1).step({"w": theta}, {"w": np.array([1.0])})
        assert theta[0] == pytest.approx(0.9)

    def test_rmsprop_constant_gradient_fixed_point(self):
        # v_t = (1 - rho^t) g^2, so the step tends to lr * g / |g| = lr
        theta = np.array([0.0])
        opt = RMSProp(lr=1e-3)
        g = np.array([2.5])
        steps = []
        for _ in range(300):
            before = theta.copy()
            opt.step({"w": theta}, {"w": g})
            steps.append(abs(theta[0] - before[0]))
        t = 300
        expect = 1e-3 * 2.5 / (np.sqrt((1 - 0.9 ** t) * 6.25) + 1e-8)
        assert steps[-1] == pytest.approx(expect, rel=1e-10)
        assert steps[-1] == pytest.approx(1e-3, rel=1e-6)
        # first step is lr / sqrt(1 - rho)
        assert steps[0] == pytest.approx(1e-3 / np.sqrt(0.1), rel=1e-6)

    def test_adam_first_step(self):
        theta = np.array([0.0])
        Adam(lr=1e-3).step({"w": theta}, {"w": np.array([1.0])})
        # m_hat = 1, v_hat = 1 after bias correction
        assert theta[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_adam_matches_closed_form_over_steps(self):
        rng = np.random.default_rng(0)
        gs = rng.normal(size=20)
        theta = np.array([0.0])
        opt = Adam(lr=0.01)
        m = v = 0.0
        ref = 0.0
        for t, g in enumerate(gs, 1):
            opt.step({"w": theta}, {"w": np.array([g])})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert theta[0] == pytest.approx(ref, rel=1e-12)

    def test_decoupled_weight_decay(self):
        theta = np.array([2.0])
        SGD(lr=0.1, weight_decay=0.5).step({"w": theta}, {"w": np.array([0.0])})
        assert theta[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


class TestQuadraticBowl:
    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(["sgd", "rmsprop", "adam"]),
           st.floats(3.0, 10.0), st.booleans())
    def test_monotone_after_ten_steps(self, kind, start, negative):
        theta = np.array([-start if negative else start])
        opt = make_optimizer(kind, lr=0.01)
        f = []
        for _ in range(200):
            f.append(0.5 * float(theta[0] ** 2))
            opt.step({"w": theta}, {"w": theta.copy()})
        f.append(0.5 * float(theta[0] ** 2))
        assert all(b < a for a, b in zip(f[10:], f[11:]))


class TestContracts:
    def test_nonfinite_names_tensor(self):
        params = {"a": np.zeros(2), "b": np.zeros(2)}
        with pytest.raises(NonFiniteGradient, match="'b'"):
            Adam().step(params, {"a": np.ones(2), "b": np.array([1.0, np.nan])})
        # nothing was updated
        assert not params["a"].any()

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            SGD(lr=0.1).step({"a": np.zeros(2)}, {"a": np.zeros(3)})

    def test_unknown_kind_and_bad_lr(self):
        with pytest.raises(ContractError):
            make_optimizer("lbfgs")
        with pytest.raises(ContractError):
            SGD(lr=0.0)

    @pytest.mark.parametrize("kind", ["sgd", "rmsprop", "adam"])
    def test_coefficients_untouched(self, kind):
        cfg = ModelConfig(3, 4, 2, 2, "miru2")
        p = init_model(cfg, CoeffSpec(random=True), Rng(0))
        lam, beta = p.cell.lam.copy(), p.cell.beta.copy()
        opt = make_optimizer(kind, lr=0.1)
        params = p.tensors()
        for _ in range(5):
            opt.step(params, {k: np.ones_like(v) for k, v in params.items()})
        assert lam.tobytes() == p.cell.lam.tobytes()
        assert beta.tobytes() == p.cell.beta.tobytes()


class TestSerialization:
    @pytest.mark.parametrize("kind", ["sgd", "rmsprop", "adam"])
    def test_resume_is_bitwise(self, tmp_path, kind):
        rng = np.random.default_rng(0)
        grads = [{"w": rng.normal(size=(3, 2)).astype(np.float32)} for _ in range(10)]
        a = {"w": np.ones((3, 2), np.float32)}
        opt = make_optimizer(kind, lr=0.01, weight_decay=0.1)
        for g in grads:
            opt.step(a, g)
        b = {"w": np.ones((3, 2), np.float32)}
        opt2 = make_optimizer(kind, lr=0.01, weight_decay=0.1)
        for g in grads[:4]:
            opt2.step(b, g)
        opt2.save(tmp_path / "opt.bin")
        opt3 = type(opt2).load(tmp_path / "opt.bin")
        assert opt3.t == 4 and type(opt3) is type(opt2)
        for g in grads[4:]:
            opt3.step(b, g)
        np.testing.assert_array_equal(a["w"], b["w"])
