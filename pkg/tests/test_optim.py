"""AdamW update math and cosine schedule."""

import numpy as np
import pytest

from fedoap.errors import InvalidConfig, NonFiniteValue, StepOutOfRange
from fedoap.optim import AdamWConfig, AdamWState, adamw_step, cosine_lr


def adamw_reference(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=1e-5):
    """Textbook decoupled-weight-decay Adam, one array."""
    p = np.array(p0, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)
    return p


class TestAdamW:
    def test_trajectory_matches_reference(self, rng):
        p0 = rng.normal(size=(3, 4))
        grad_seq = [rng.normal(size=(3, 4)) for _ in range(25)]
        params = {"w": p0.copy()}
        state = AdamWState({"w": p0.shape})
        for g in grad_seq:
            adamw_step(params, {"w": g}, state, lr=1e-2)
        want = adamw_reference(p0, grad_seq, lr=1e-2)
        np.testing.assert_allclose(params["w"], want, rtol=1e-12, atol=1e-15)
        assert state.step == 25

    def test_first_step_is_signed_unit_step(self, rng):
        g = rng.normal(size=8)
        params = {"w": np.zeros(8)}
        state = AdamWState({"w": (8,)}, AdamWConfig(weight_decay=0.0))
        adamw_step(params, {"w": g}, state, lr=0.5)
        np.testing.assert_allclose(params["w"], -0.5 * np.sign(g), rtol=1e-6)

    def test_weight_decay_is_decoupled(self):
        params = {"w": np.full(4, 2.0)}
        state = AdamWState({"w": (4,)}, AdamWConfig(weight_decay=0.1))
        adamw_step(params, {"w": np.zeros(4)}, state, lr=0.5)
        # zero gradient: the only movement is lr * wd * p
        np.testing.assert_allclose(params["w"], 2.0 - 0.5 * 0.1 * 2.0, rtol=1e-12)

    def test_params_without_gradients_stay_frozen(self, rng):
        frozen = rng.normal(size=3)
        params = {"a": rng.normal(size=3), "b": frozen.copy()}
        state = AdamWState({"a": (3,), "b": (3,)})
        adamw_step(params, {"a": np.ones(3)}, state, lr=0.1)
        np.testing.assert_array_equal(params["b"], frozen)
        assert not np.array_equal(params["a"], frozen)

    def test_updates_are_deterministic(self, rng):
        p0 = rng.normal(size=(5,))
        g = rng.normal(size=(5,))

        def run():
            params = {"w": p0.copy()}
            state = AdamWState({"w": (5,)})
            for _ in range(7):
                adamw_step(params, {"w": g}, state, lr=3e-3)
            return params["w"]

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_gradient_rejected(self):
        params = {"w": np.zeros(2)}
        state = AdamWState({"w": (2,)})
        with pytest.raises(NonFiniteValue):
            adamw_step(params, {"w": np.array([1.0, np.inf])}, state, lr=1e-3)

    def test_config_validation(self):
        with pytest.raises(InvalidConfig):
            AdamWState({}, AdamWConfig(beta1=1.0))
        with pytest.raises(InvalidConfig):
            AdamWState({}, AdamWConfig(eps=0.0))
        with pytest.raises(InvalidConfig):
            AdamWState({}, AdamWConfig(weight_decay=-0.1))


class TestCosineSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)

    def test_midpoint_is_average(self):
        assert cosine_lr(50, 100, 2e-3, 0.0) == pytest.approx(1e-3)

    def test_monotone_decreasing(self):
        values = [cosine_lr(s, 64, 1e-2, 1e-4) for s in range(65)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_step_bounds_enforced(self):
        with pytest.raises(StepOutOfRange):
            cosine_lr(-1, 10, 1e-3, 1e-5)
        with pytest.raises(StepOutOfRange):
            cosine_lr(11, 10, 1e-3, 1e-5)
        with pytest.raises(StepOutOfRange):
            cosine_lr(0, 0, 1e-3, 1e-5)

    def test_min_above_base_rejected(self):
        with pytest.raises(InvalidConfig):
            cosine_lr(0, 10, 1e-5, 1e-3)
