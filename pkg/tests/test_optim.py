import math

import numpy as np
import pytest

from qcap.optim import LrSchedule, OptimizerState, adamw_step, clip_grad_norm, lr_at
from qcap.tensor import Tensor


def _params(*arrays):
    return [Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]


def test_zero_grad_zero_decay_is_identity():
    ps = _params(np.ones((2, 3)), [0.5, -1.0])
    before = [p.data.copy() for p in ps]
    state = OptimizerState.for_params(ps, weight_decay=0.0)
    for p in ps:
        p.grad = np.zeros_like(p.data)
    adamw_step(ps, state, lr=0.1)
    for p, b in zip(ps, before):
        assert np.array_equal(p.data, b)
    assert state.step == 1


def test_decay_only_path():
    (p,) = _params(np.full((2, 2), 3.0))
    p.grad = np.zeros((2, 2))
    adamw_step([p], OptimizerState.for_params([p], weight_decay=0.02), lr=0.1)
    np.testing.assert_allclose(p.data, 3.0 * 0.998, rtol=0, atol=1e-15)


def test_one_step_hand_computation():
    (p,) = _params([[2.0]])
    p.grad = np.array([[1.0]])
    lr, wd = 0.01, 0.02
    adamw_step([p], OptimizerState.for_params([p], weight_decay=wd), lr)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    expected = 2.0 * (1 - lr * wd) - lr * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert p.data[0, 0] == pytest.approx(expected, abs=1e-15)


def test_vectors_are_not_decayed_by_default():
    w, b = _params(np.ones((2, 2)), np.ones(2))
    state = OptimizerState.for_params([w, b])
    assert state.decay == [True, False]


def test_missing_grad_raises():
    ps = _params([1.0])
    with pytest.raises(ValueError):
        adamw_step(ps, OptimizerState.for_params(ps), 0.1)


def test_clip_grad_norm():
    ps = _params([0.0, 0.0])
    ps[0].grad = np.array([3.0, 4.0])
    assert clip_grad_norm(ps, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(ps[0].grad, [0.6, 0.8])


class TestSchedule:
    def test_anchor_values(self):
        s = LrSchedule()
        assert lr_at(s, 0) == pytest.approx(1.0e-5)
        assert lr_at(s, 2) == pytest.approx(2.0e-4)
        assert lr_at(s, 50 - 1e-9) == pytest.approx(1.0e-6, abs=1e-12)

    def test_warmup_is_linear(self):
        s = LrSchedule()
        assert lr_at(s, 1) == pytest.approx(0.5 * (1.0e-5 + 2.0e-4))

    def test_cosine_midpoint(self):
        s = LrSchedule()
        assert lr_at(s, 26) == pytest.approx(1.0e-6 + 0.5 * (2.0e-4 - 1.0e-6))

    def test_monotone_after_warmup(self):
        s = LrSchedule()
        values = [lr_at(s, 2 + 0.1 * k) for k in range(480)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    @pytest.mark.parametrize("x", [-0.1, 50, 51])
    def test_out_of_range(self, x):
        with pytest.raises(ValueError):
            lr_at(LrSchedule(), x)

    def test_invalid_schedule(self):
        with pytest.raises(ValueError):
            LrSchedule(lr_peak=1e-7)
        with pytest.raises(ValueError):
            LrSchedule(warmup_epochs=50)
