"""Adam, the learning-rate schedule and the non-learned reconstructions."""

from __future__ import annotations

import numpy as np
import pytest

from hpalf import tensorcore as tc
from hpalf.baselines import TVProblem, reconstruct_tv, reconstruct_zero_fill, tv_smooth
from hpalf.errors import ConfigurationError, DimensionError
from hpalf.mrisim import degrade, make_mask
from hpalf.optim import Adam, AdamState, adam_step, step_lr
from hpalf.schemas import MaskSpec
from hpalf.tensorcore import Tape, Tensor


def test_first_adam_step_moves_by_the_learning_rate():
    params = [np.array([1.0, -2.0, 3.0])]
    grads = [np.array([0.5, -4.0, 0.0])]
    (updated,), state = adam_step(params, grads, AdamState(), lr=0.1)
    np.testing.assert_allclose(updated, [0.9, -1.9, 3.0], atol=1e-6)
    assert state.step == 1


def test_adam_treats_missing_gradients_as_zero_and_checks_shapes():
    (updated,), _ = adam_step([np.ones(2)], [None], AdamState(), lr=0.1)
    np.testing.assert_array_equal(updated, np.ones(2))
    with pytest.raises(DimensionError):
        adam_step([np.ones(2)], [np.ones(3)], AdamState(), lr=0.1)
    with pytest.raises(DimensionError):
        adam_step([np.ones(2)], [], AdamState(), lr=0.1)


def test_adam_minimises_a_quadratic():
    x = Tensor(np.array([2.0, -1.5]), requires_grad=True)
    optimizer = Adam([x], lr=0.05)
    for _ in range(500):
        optimizer.zero_grad()
        with Tape():
            tc.backward(tc.tsum(tc.square(x)))
        optimizer.step()
    assert np.all(np.abs(x.data) < 0.1)


@pytest.mark.parametrize("epoch,expected", [(0, 1e-3), (4, 1e-3), (5, 5e-4), (12, 2.5e-4)])
def test_step_schedule_halves_every_period(epoch, expected):
    assert step_lr(1e-3, epoch, 5) == pytest.approx(expected)


def _piecewise_image() -> np.ndarray:
    image = np.full((32, 32), -1.0)
    image[8:24, 8:24] = 0.5
    image[12:20, 14:18] = -0.2
    return image


def test_zero_fill_matches_the_degraded_image():
    mask = make_mask(MaskSpec(fraction=0.4, seed=2), 32, 32)
    sample, filled = degrade(_piecewise_image(), mask)
    np.testing.assert_allclose(reconstruct_zero_fill(sample), filled)


def test_tv_smooth_of_a_constant_image():
    assert tv_smooth(np.zeros((4, 4)), eps=1e-4) == pytest.approx(16 * 1e-2)


def test_tv_gradient_matches_finite_differences(rng, numeric_gradient):
    mask = make_mask(MaskSpec(fraction=0.5, seed=1), 8, 8)
    sample, _ = degrade(rng.uniform(-1, 1, size=(8, 8)), mask)
    problem = TVProblem(sample, lambda_fidelity=0.7, eps=1e-2)
    x = rng.uniform(-1, 1, size=(8, 8))
    expected = numeric_gradient(problem.objective, x.copy(), 1e-6)
    np.testing.assert_allclose(problem.gradient(x), expected, rtol=1e-5, atol=1e-7)


def test_tv_objective_never_increases():
    mask = make_mask(MaskSpec(kind="g1d", fraction=0.3, seed=4), 32, 32)
    sample, _ = degrade(_piecewise_image(), mask, noise_sigma=0.02, seed=1)
    result = reconstruct_tv(sample, lambda_fidelity=1.0, iterations=50)
    values = np.array(result.objective)
    assert np.all(np.diff(values) <= 1e-12 * np.abs(values[:-1]).max())
    assert values[-1] < values[0]
    assert result.iterations == len(values) - 1


def test_tv_with_a_full_mask_stays_at_the_image():
    image = _piecewise_image()
    sample, _ = degrade(image, np.ones((32, 32)))
    result = reconstruct_tv(sample, lambda_fidelity=1e5, iterations=20)
    np.testing.assert_allclose(result.image, image, atol=1e-3)


def test_tv_arguments_are_validated():
    sample, _ = degrade(np.zeros((8, 8)), np.ones((8, 8)))
    with pytest.raises(ConfigurationError):
        reconstruct_tv(sample, iterations=0)
    with pytest.raises(ConfigurationError):
        reconstruct_tv(sample, lambda_fidelity=-1.0)


def test_zero_gradient_is_a_fixed_point():
    params = [np.array([0.3, -0.7])]
    state = AdamState()
    for _ in range(5):
        params, state = adam_step(params, [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(params[0], [0.3, -0.7])


def test_constant_gradient_moves_by_the_learning_rate_each_step():
    params, state = [np.zeros(3)], AdamState()
    for _ in range(200):
        previous = params[0].copy()
        params, state = adam_step(params, [np.array([2.0, -0.5, 1e-3])], state, lr=0.01)
    np.testing.assert_allclose(previous - params[0], [0.01, -0.01, 0.01], rtol=1e-3)
