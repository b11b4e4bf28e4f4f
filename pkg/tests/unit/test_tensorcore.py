"""Gradient checks for the reverse-mode differentiation core."""

from __future__ import annotations

import numpy as np
import pytest

from hpalf import tensorcore as tc
from hpalf.errors import ConfigurationError, ContractError, DimensionError, DivergenceError, NonFiniteError
from hpalf.tensorcore import Tape, Tensor


SEEDS = range(20)
TOLERANCE = 1e-4


def _away_from_kinks(values: np.ndarray) -> np.ndarray:
    return values + 0.1 * np.sign(values)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize(
    "build",
    [
        lambda x: tc.tsum(tc.square(x) * 3.0 - x),
        lambda x: tc.mean(tc.exp(x * 0.5)),
        lambda x: tc.tsum(tc.log(tc.square(x) + 1.0)),
        lambda x: tc.tsum(tc.sigmoid(x) * tc.tanh(x)),
        lambda x: tc.tsum(tc.leaky_relu(x, 0.2) * x),
        lambda x: tc.tsum(tc.relu(x) * x),
        lambda x: tc.tsum(tc.softmax(x, axis=-1) * np.arange(x.shape[-1])),
        lambda x: tc.tsum(tc.getitem(x, (slice(None), 1)) ** 2.0),
        lambda x: tc.tsum(tc.concat([x, x * 2.0], axis=0) ** 2.0),
        lambda x: tc.tsum(tc.stack([x, tc.square(x)], axis=1)),
        lambda x: tc.tsum(tc.reshape(x, (-1,)) * np.arange(x.size)),
        lambda x: tc.tsum(tc.square(tc.pool_global_sum(tc.reshape(x, (1, 3, 2, 2))))),
    ],
)
def test_elementwise_and_shape_gradients_match_finite_differences(build, seed, gradient_error):
    values = _away_from_kinks(np.random.default_rng(seed).normal(size=(3, 4)))
    assert gradient_error(build, values) < TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_gradients_match_finite_differences(stride, padding, seed, gradient_error):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    weights = rng.normal(size=tc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).shape)

    def loss(xv, wv, bv):
        return tc.tsum(tc.conv2d(xv, wv, bv, stride, padding) * weights)

    assert gradient_error(lambda t: loss(t, Tensor(w), Tensor(b)), x) < TOLERANCE
    assert gradient_error(lambda t: loss(Tensor(x), t, Tensor(b)), w) < TOLERANCE
    assert gradient_error(lambda t: loss(Tensor(x), Tensor(w), t), b) < TOLERANCE


def test_conv_transpose_is_the_adjoint_of_conv(rng):
    x = rng.normal(size=(1, 2, 8, 8))
    y = rng.normal(size=(1, 3, 4, 4))
    w = rng.normal(size=(3, 2, 4, 4))
    forward = tc.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    adjoint = tc.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1).data
    assert forward.shape == y.shape
    assert adjoint.shape == x.shape
    assert np.sum(forward * y) == pytest.approx(np.sum(x * adjoint), rel=1e-10)


@pytest.mark.parametrize("seed", SEEDS)
def test_conv_transpose_gradients_match_finite_differences(seed, gradient_error):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 3, 3, 3))
    w = rng.normal(size=(3, 2, 4, 4))
    weights = rng.normal(size=(1, 2, 6, 6))

    def loss(xv, wv):
        return tc.tsum(tc.conv_transpose2d(xv, wv, stride=2, padding=1) * weights)

    assert gradient_error(lambda t: loss(t, Tensor(w)), x) < TOLERANCE
    assert gradient_error(lambda t: loss(Tensor(x), t), w) < TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_gradients_match_finite_differences(seed, gradient_error):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 2, 3, 3))
    gamma, beta = rng.normal(size=2), rng.normal(size=2)
    weights = rng.normal(size=x.shape)

    def loss(xv, gv):
        out = tc.batchnorm2d(xv, gv, Tensor(beta), np.zeros(2), np.ones(2), training=True)
        return tc.tsum(out * weights)

    assert gradient_error(lambda t: loss(t, Tensor(gamma)), x) < TOLERANCE
    assert gradient_error(lambda t: loss(Tensor(x), t), gamma) < TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_dense_gradients_match_finite_differences(seed, gradient_error):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(5, 3))
    w = rng.normal(size=(2, 3))
    b = rng.normal(size=2)

    assert gradient_error(lambda t: tc.tsum(tc.square(tc.dense(Tensor(v), t, Tensor(b)))), w) < TOLERANCE
    assert gradient_error(lambda t: tc.tsum(tc.square(tc.dense(t, Tensor(w), Tensor(b)))), v) < TOLERANCE
    assert gradient_error(lambda t: tc.tsum(tc.square(tc.dense(Tensor(v), Tensor(w), t))), b) < TOLERANCE


def test_gradients_accumulate_across_reused_inputs():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape():
        tc.backward(tc.tsum(x * x + x))
    assert x.grad[0] == pytest.approx(5.0)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    out = tc.tsum(x * 2.0)
    assert out.is_leaf
    with pytest.raises(ContractError):
        tc.backward(out)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        out = x * 2.0
        with pytest.raises(ContractError):
            tc.backward(out)


def test_reverse_sweep_visits_nodes_in_reverse_order():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        tc.backward(tc.tsum(tc.exp(x * 2.0)))
    assert tape.visits == sorted(tape.visits, reverse=True)
    assert len(tape) == 3


def test_errors_on_bad_inputs():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([np.nan]))
    with pytest.raises(DivergenceError):
        tc.log(Tensor(np.array([0.0, 1.0])))
    with pytest.raises(DimensionError):
        tc.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ConfigurationError):
        tc.activation(Tensor(np.ones(2)), "swish")
    with pytest.raises(ConfigurationError):
        tc.set_precision("float16")
    with pytest.raises(DimensionError, match="single-element"):
        Tensor(np.ones(3)).item()
    assert Tensor(np.array([[2.5]])).item() == 2.5


def test_precision_context_restores_previous_dtype():
    assert tc.default_dtype() == np.float64
    with tc.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64


def test_pool_global_sum_reduces_spatial_axes(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    np.testing.assert_allclose(tc.pool_global_sum(Tensor(x)).data, x.sum(axis=(2, 3)))
