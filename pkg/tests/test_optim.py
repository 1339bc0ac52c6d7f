# pylint: disable=missing-module-docstring
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from kiss_ocr.layers import Parameter
from kiss_ocr.optim import RAdam, clip_grad_norm, learning_rate_for_epoch, parameter_hash
from kiss_ocr.tensor import NonFiniteError
from kiss_ocr.training import TrainConfig


def _optimizer(rectify=True, lr=0.1):
    parameter = Parameter(np.array([1.0, -2.0]))
    return parameter, RAdam([("weight", parameter)], lr=lr, rectify=rectify)


def test_first_step_is_a_momentum_step():
    parameter, optimizer = _optimizer()
    parameter.grad = np.array([0.5, -1.0])
    optimizer.step()
    # the bias corrected first moment equals the gradient
    assert_allclose(parameter.data, [1.0 - 0.05, -2.0 + 0.1])
    assert optimizer.state.step == 1


def test_adaptive_rate_starts_once_the_variance_is_tractable():
    rectified, rectified_optimizer = _optimizer()
    plain, plain_optimizer = _optimizer(rectify=False)
    history = []
    for _ in range(6):
        for parameter in (rectified, plain):
            parameter.grad = np.array([0.5, -1.0])
        rectified_optimizer.step()
        plain_optimizer.step()
        history.append(np.array_equal(rectified.data, plain.data))
    assert history == [True, True, True, False, False, False]


def test_parameters_without_gradient_are_skipped():
    first, second = Parameter(np.ones(2)), Parameter(np.ones(3))
    optimizer = RAdam([("first", first), ("second", second)], lr=0.1)
    first.grad = np.ones(2)
    optimizer.step()
    assert_array_equal(second.data, 1.0)
    assert "second" not in optimizer.state.exp_avg
    optimizer.zero_grad()
    assert first.grad is None


def test_non_finite_gradient_changes_nothing():
    parameter, optimizer = _optimizer()
    parameter.grad = np.array([np.nan, 1.0])
    with pytest.raises(NonFiniteError, match="weight"):
        optimizer.step()
    assert_array_equal(parameter.data, [1.0, -2.0])
    assert optimizer.state.step == 0


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"betas": (0.9, 1.0)}, {"eps": 0.0}])
def test_invalid_settings(kwargs):
    with pytest.raises(ValueError):
        RAdam([], **kwargs)


def test_clip_grad_norm():
    first, second = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    first.grad, second.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm([first, second], 1.0) == pytest.approx(5.0)
    assert_allclose([first.grad[0], second.grad[0]], [0.6, 0.8])
    # below the limit nothing changes
    assert clip_grad_norm([first, second], 2.0) == pytest.approx(1.0)
    assert_allclose([first.grad[0], second.grad[0]], [0.6, 0.8])
    with pytest.raises(ValueError):
        clip_grad_norm([first], 0.0)


def test_learning_rate_schedule():
    assert learning_rate_for_epoch(1e-4, 0.99, 0) == 1e-4
    assert learning_rate_for_epoch(1e-4, 0.99, 2) == pytest.approx(1e-4 * 0.9801)


@pytest.mark.parametrize("epoch,expected", [(0, 1e-4), (1, 1e-5), (2, 1e-6)])
def test_default_schedule_divides_by_ten_every_epoch(epoch, expected):
    config = TrainConfig()
    assert learning_rate_for_epoch(config.lr, config.lr_decay_per_epoch, epoch) == pytest.approx(expected, rel=1e-12)


def test_parameter_hash():
    parameter = Parameter(np.ones(3))
    digest = parameter_hash({"a": parameter})
    assert len(digest) == 64
    assert digest == parameter_hash([("a", parameter)])
    assert digest != parameter_hash({"b": parameter})
    parameter.assign(np.array([1.0, 1.0, 2.0]))
    assert digest != parameter_hash({"a": parameter})


def test_zero_gradients_change_nothing():
    parameter, optimizer = _optimizer()
    for _ in range(8):
        parameter.grad = np.zeros(2)
        optimizer.step()
    assert_array_equal(parameter.data, [1.0, -2.0])


def test_clipped_norm_never_exceeds_the_limit(rng):
    parameters = [Parameter(np.zeros(shape)) for shape in ((3, 4), (5,), (2, 2, 2))]
    for _ in range(20):
        for parameter in parameters:
            parameter.grad = rng.normal(0.0, rng.uniform(0.01, 10.0), parameter.shape)
        clip_grad_norm(parameters, 1.5)
        norm = np.sqrt(sum(np.sum(parameter.grad**2) for parameter in parameters))
        assert norm <= 1.5 + 1e-6
