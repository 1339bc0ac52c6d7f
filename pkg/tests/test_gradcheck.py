# pylint: disable=missing-module-docstring
import numpy as np
import pytest

from kiss_ocr.gradcheck import (
    CaseResult,
    GradCheckRegistry,
    check_gradients,
    format_report,
    gradcheck_registry,
    relative_error,
)
from kiss_ocr.layers import Parameter
from kiss_ocr.tensor import record_op


def _square(values, factor=2.0):
    return record_op("square", values.data**2, (values,), lambda grad: (factor * values.data * grad,))


def test_relative_error():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == pytest.approx(0.2)
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    # tiny gradients are compared against the floor
    assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-3)


def test_check_gradients_restores_the_inputs(rng, float64):
    values = Parameter(rng.uniform(-1, 1, 40))
    original = values.data.copy()
    error = check_gradients([values], lambda: _square(values).sum(), 1e-4, rng)
    assert error < 1e-6
    assert np.array_equal(values.data, original)


@pytest.mark.slow
def test_all_registered_operations_pass():
    results = gradcheck_registry.run(seed=0)
    failed = [(result.name, result.worst_error) for result in results if not result.passed]
    assert not failed
    assert [result.name for result in results] == list(gradcheck_registry.names)


def test_core_operations_cover_the_model():
    expected = {"conv2d", "group_norm", "layer_norm", "softmax", "lstm_cell", "spatial_sampler", "attention"}
    assert expected <= set(gradcheck_registry.names)
    assert "end_to_end" in gradcheck_registry.names


def test_selected_operations():
    results = gradcheck_registry.run(seed=3, names=["relu", "matmul"])
    assert [result.name for result in results] == ["relu", "matmul"]
    assert all(result.passed for result in results)
    with pytest.raises(ValueError, match="unknown_op"):
        gradcheck_registry.run(names=["unknown_op"])


def test_a_wrong_backward_rule_is_detected():
    registry = GradCheckRegistry()

    @registry.register("square")
    def _correct(rng):
        values = Parameter(rng.uniform(-1, 1, 5))
        return (values,), lambda: _square(values).sum()

    @registry.register("square_wrong")
    def _wrong(rng):
        values = Parameter(rng.uniform(-1, 1, 5))
        return (values,), lambda: _square(values, factor=3.0).sum()

    @registry.register("raises")
    def _raises(rng):
        raise RuntimeError("broken case")

    results = {result.name: result for result in registry.run()}
    assert results["square"].passed
    assert not results["square_wrong"].passed
    assert results["square_wrong"].worst_error == pytest.approx(1 / 3, rel=1e-3)
    assert results["raises"].worst_error == float("inf")
    report = format_report(list(results.values()))
    assert "square_wrong" in report and "FAIL" in report
    assert report.count("\n") == 3


def test_duplicate_names_are_rejected():
    registry = GradCheckRegistry()
    registry.register("op")(lambda rng: None)
    with pytest.raises(ValueError, match="already registered"):
        registry.register("op")(lambda rng: None)


def test_case_result():
    assert CaseResult("op", 1e-5, 1e-4).passed
    assert not CaseResult("op", 1e-4, 1e-4).passed
