# pylint: disable=missing-module-docstring
import threading

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from kiss_ocr import tensor as T
from kiss_ocr.layers import Parameter
from kiss_ocr.tensor import (
    ComputationRecord,
    NonFiniteError,
    ShapeMismatchError,
    Tensor,
    debug_mode,
    default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    record_op,
)


def test_default_dtype_is_float32():
    assert default_dtype() is np.float32
    assert Tensor([1, 2, 3]).dtype == np.float32


def test_precision_context(float64):
    assert default_dtype() is np.float64
    assert T.zeros((2,)).dtype == np.float64


def test_precision_is_restored():
    with precision(np.float64):
        pass
    assert default_dtype() is np.float32


def test_item_requires_a_scalar():
    assert Tensor([[3.0]]).item() == 3.0
    with pytest.raises(ShapeMismatchError):
        Tensor([1.0, 2.0]).item()


def test_simple_gradient(float64):
    weight = Parameter([1.0, 2.0, 3.0])
    with ComputationRecord() as record:
        loss = (weight * weight).sum()
        record.backward(loss)
    assert_allclose(weight.grad, [2.0, 4.0, 6.0])


def test_reused_tensor_accumulates(float64):
    a = Parameter([2.0])
    with ComputationRecord() as record:
        b = a * 3.0
        loss = (a * b + b).sum()
        record.backward(loss)
    # d/da (3a^2 + 3a) = 6a + 3
    assert_allclose(a.grad, [15.0])


def test_leaf_gradients_accumulate_across_calls(float64):
    a = Parameter([1.0, -1.0])
    for _ in range(2):
        with ComputationRecord() as record:
            record.backward((a * 2.0).sum())
    assert_allclose(a.grad, [4.0, 4.0])


def test_backward_clears_the_record(float64):
    a = Parameter([1.0])
    with ComputationRecord() as record:
        loss = (a * a).sum()
        assert len(record) == 2
        record.backward(loss)
        assert len(record) == 0


def test_backward_retain_allows_a_second_pass(float64):
    a = Parameter([3.0])
    with ComputationRecord() as record:
        loss = (a * a).sum()
        record.backward(loss, retain=True)
        record.backward(loss)
    assert_allclose(a.grad, [12.0])


def test_backward_requires_a_scalar(float64):
    a = Parameter([1.0, 2.0])
    with ComputationRecord() as record:
        with pytest.raises(ShapeMismatchError):
            record.backward(a * 2.0)


def test_backward_rejects_foreign_tensor(float64):
    a = Parameter([1.0])
    with ComputationRecord():
        loss = (a * a).sum()
    with ComputationRecord() as other:
        with pytest.raises(ValueError):
            other.backward(loss)


def test_tensor_backward_uses_its_record(float64):
    a = Parameter([1.5])
    with ComputationRecord():
        loss = (a * a).sum()
    loss.backward()
    assert_allclose(a.grad, [3.0])


def test_constants_are_not_recorded():
    with ComputationRecord() as record:
        result = Tensor([1.0]) + Tensor([2.0])
    assert len(record) == 0
    assert not result.requires_grad


def test_no_grad():
    a = Parameter([1.0])
    with ComputationRecord() as record:
        with no_grad():
            assert not is_grad_enabled()
            result = a * 2.0
        assert len(record) == 0
    assert is_grad_enabled()
    assert not result.requires_grad


def test_numpy_defers_to_tensor():
    result = np.float32(2.0) * Tensor([1.0, 2.0])
    assert isinstance(result, Tensor)
    assert_allclose(result.data, [2.0, 4.0])


def test_broadcast_gradients_are_reduced(float64):
    a = Parameter(np.ones((3, 4)))
    b = Parameter(np.ones((4,)))
    with ComputationRecord() as record:
        record.backward((a * b).sum())
    assert b.grad.shape == (4,)
    assert_allclose(b.grad, np.full(4, 3.0))


def test_incompatible_shapes():
    with pytest.raises(ShapeMismatchError, match="add"):
        _ = Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))
    with pytest.raises(ShapeMismatchError, match="matmul"):
        _ = Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ShapeMismatchError, match="reshape"):
        Tensor(np.ones(6)).reshape(4, 2)


def test_matmul_broadcasts_batches(float64):
    a = Parameter(np.ones((2, 3, 4)))
    b = Parameter(np.ones((4, 5)))
    with ComputationRecord() as record:
        result = a @ b
        record.backward(result.sum())
    assert result.shape == (2, 3, 5)
    assert_allclose(b.grad, np.full((4, 5), 6.0))


def test_getitem_repeated_indices_accumulate(float64):
    a = Parameter(np.arange(4.0))
    with ComputationRecord() as record:
        record.backward(a[[0, 0, 3]].sum())
    assert_allclose(a.grad, [2.0, 0.0, 0.0, 1.0])


def test_concat_and_stack_split_the_gradient(float64):
    a, b = Parameter(np.ones((2, 1))), Parameter(np.ones((2, 2)))
    with ComputationRecord() as record:
        record.backward((T.concat([a, b], axis=1) * Tensor([1.0, 2.0, 3.0])).sum())
    assert_allclose(a.grad, [[1.0], [1.0]])
    assert_allclose(b.grad, [[2.0, 3.0], [2.0, 3.0]])

    c, d = Parameter(np.ones(3)), Parameter(np.ones(3))
    with ComputationRecord() as record:
        stacked = T.stack([c, d])
        record.backward((stacked * Tensor([[1.0], [5.0]])).sum())
    assert stacked.shape == (2, 3)
    assert_allclose(d.grad, np.full(3, 5.0))


def test_embedding(float64):
    table = Parameter(np.arange(12.0).reshape(4, 3))
    with ComputationRecord() as record:
        rows = T.embedding(table, np.array([[1, 1], [3, 0]]))
        record.backward(rows.sum())
    assert rows.shape == (2, 2, 3)
    assert_array_equal(rows.data[0, 0], [3.0, 4.0, 5.0])
    assert_allclose(table.grad[:, 0], [1.0, 2.0, 0.0, 1.0])


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(IndexError):
        T.embedding(Tensor(np.zeros((4, 2))), np.array([4]))


def test_dropout():
    values = Tensor(np.ones((100, 100)))
    assert T.dropout(values, 0.5, None, training=False) is values
    dropped = T.dropout(values, 0.5, np.random.default_rng(0))
    kept = dropped.data != 0
    assert 0.4 < kept.mean() < 0.6
    assert_allclose(dropped.data[kept], 2.0)
    with pytest.raises(ValueError):
        T.dropout(values, 0.5, None, training=True)


def test_mean_over_axes(float64):
    a = Parameter(np.ones((2, 3, 4)))
    with ComputationRecord() as record:
        result = a.mean(axis=(0, 2))
        record.backward(result.sum())
    assert result.shape == (3,)
    assert_allclose(a.grad, np.full((2, 3, 4), 1.0 / 8))


def test_sigmoid_and_tanh_values():
    values = Tensor([-100.0, 0.0, 100.0])
    assert_allclose(T.sigmoid(values).data, [0.0, 0.5, 1.0], atol=1e-6)
    assert_allclose(T.tanh(values).data, [-1.0, 0.0, 1.0], atol=1e-6)


def test_debug_mode_reports_the_op():
    a = Parameter([0.0])
    with debug_mode(), ComputationRecord():
        with pytest.raises(NonFiniteError, match="log"):
            T.log(a * 0.0)


def test_custom_op_via_record_op(float64):
    a = Parameter([1.0, 2.0])
    with ComputationRecord() as record:
        doubled = record_op("double", a.data * 2, (a,), lambda grad: (grad * 2,))
        record.backward(doubled.sum())
    assert_allclose(a.grad, [2.0, 2.0])


def test_parameter_assign_checks_the_shape():
    parameter = Parameter(np.zeros(3))
    parameter.assign(np.ones(3))
    assert_array_equal(parameter.data, np.ones(3))
    with pytest.raises(ShapeMismatchError):
        parameter.assign(np.ones(4))


def test_records_are_thread_local():
    seen = []

    def worker():
        seen.append(T.current_record())

    thread = threading.Thread(target=worker)
    thread.start()
    thread.join()
    assert seen[0] is not T.current_record()
