"""
A small dense tensor type with reverse-mode automatic differentiation. Every differentiable operation appends a
node to the active :class:`ComputationRecord`. Calling :meth:`ComputationRecord.backward` on a scalar visits the
recorded nodes in exact reverse order and accumulates the gradients of all tensors that require them.
"""

from __future__ import annotations

import itertools
import logging
import os
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, NamedTuple, Sequence, Union

import numpy as np
from scipy.special import expit

try:
    from typing import Self  # type: ignore # Python 3.11
except ImportError:
    from typing_extensions import Self

BackwardRule = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]
Index = Any


class ShapeMismatchError(ValueError):
    """
    Raised if the shapes of the operands do not conform to the operation
    """


class NonFiniteError(ArithmeticError):
    """
    Raised in debug mode if an operation consumes or produces NaN or Inf
    """


class _State(threading.local):
    def __init__(self) -> None:
        super().__init__()
        self.dtype: type = np.float32
        self.debug: bool = os.environ.get("KISS_OCR_DEBUG", "") not in ("", "0")
        self.grad_enabled: bool = True
        self.records: list[ComputationRecord] = []
        self.default_record: ComputationRecord | None = None


_state = _State()
_node_ids = itertools.count(1)


class Node(NamedTuple):
    """
    One recorded operation. The backward rule maps the gradient of the output to one gradient (or None) per input.
    """

    op: str
    input_ids: tuple[int, ...]
    output_id: int
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


class ComputationRecord:
    """
    The ordered list of operation nodes executed while the record was active. A record belongs to a single thread.
    Use it as a context manager to make it the active record:

    >>> with ComputationRecord() as record:
    ...     loss = (weight * x).sum()
    ...     record.backward(loss)
    """

    def __init__(self) -> None:
        self.__logger = logging.getLogger(__name__)
        self.__nodes: list[Node] = []
        self.__positions: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.__nodes)

    def __enter__(self) -> Self:
        _state.records.append(self)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        assert _state.records and _state.records[-1] is self
        _state.records.pop()

    @property
    def nodes(self) -> tuple[Node, ...]:
        return tuple(self.__nodes)

    def append(self, node: Node) -> None:
        self.__positions[node.output_id] = len(self.__nodes)
        self.__nodes.append(node)

    def clear(self) -> None:
        self.__nodes = []
        self.__positions = {}

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        """
        Propagate the gradient of a scalar tensor to every tensor of the record that requires a gradient. Leaf
        gradients accumulate across calls, intermediate gradients are reset.

        Parameters
        ----------
        loss: Tensor
            A scalar produced within this record
        retain: bool
            Keep the nodes, so that backward can be called again on the same record
        """
        if loss.size != 1:
            raise ShapeMismatchError(f"backward: expected a scalar, got shape {loss.shape}")
        try:
            end = self.__positions[loss.node_id]
        except KeyError:
            raise ValueError("backward: the tensor was not produced within this computation record") from None
        nodes = self.__nodes[: end + 1]
        for node in nodes:
            node.output.grad = None
        loss.grad = np.ones_like(loss.data)

        for node in reversed(nodes):
            grad = node.output.grad
            if grad is None:
                continue
            for tensor, input_grad in zip(node.inputs, node.backward(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if _state.debug and not np.all(np.isfinite(input_grad)):
                    raise NonFiniteError(f"{node.op}: backward produced a non-finite gradient")
                tensor.accumulate_grad(input_grad)
        self.__logger.debug("Back-propagated through %i nodes", len(nodes))
        if not retain:
            self.clear()


def current_record() -> ComputationRecord:
    """
    Returns the innermost active record, or the lazily created default record of this thread.
    """
    if _state.records:
        return _state.records[-1]
    if _state.default_record is None:
        _state.default_record = ComputationRecord()
    return _state.default_record


def default_dtype() -> type:
    return _state.dtype


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Operations executed inside this context are not recorded.
    """
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def precision(dtype: type) -> Iterator[None]:
    """
    Change the floating point type of newly created tensors, e.g. to `np.float64` for gradient checks.
    """
    previous = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def debug_mode(enabled: bool = True) -> Iterator[None]:
    """
    Check every operation for non-finite inputs, outputs and gradients.
    """
    previous = _state.debug
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = previous


class Tensor:
    """
    A dense, row-major array of floating point values. Tensors are treated as immutable values, only a
    :class:`kiss_ocr.layers.Parameter` may be reassigned by an optimizer.
    """

    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data: Any, requires_grad: bool = False, dtype: type | None = None) -> None:
        self._data = np.asarray(data, dtype=_state.dtype if dtype is None else dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.__node_id = next(_node_ids)
        self._record: ComputationRecord | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def node_id(self) -> int:
        return self.__node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(f"item: expected a single element, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self._data, dtype=self.dtype)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        assert grad.shape == self.shape, f"gradient shape {grad.shape} does not match tensor shape {self.shape}"
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.dtype)
        else:
            self.grad = self.grad + grad

    def backward(self, retain: bool = False) -> None:
        if self._record is None:
            raise ValueError("backward: the tensor does not depend on any tensor that requires a gradient")
        self._record.backward(self, retain=retain)

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return subtract(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return subtract(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return multiply(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return multiply(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return divide(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return divide(other, self)

    def __neg__(self) -> Tensor:
        return negative(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __rmatmul__(self, other: Any) -> Tensor:
        return matmul(other, self)

    def __getitem__(self, index: Index) -> Tensor:
        return getitem(self, index)

    @property
    def T(self) -> Tensor:  # pylint: disable=invalid-name
        return transpose(self)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: Any) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    def relu(self) -> Tensor:
        return relu(self)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def _check_finite(op: str, inputs: Sequence[Tensor], data: np.ndarray) -> None:
    for position, tensor in enumerate(inputs):
        if not np.all(np.isfinite(tensor.data)):
            raise NonFiniteError(f"{op}: input {position} of shape {tensor.shape} contains non-finite values")
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardRule) -> Tensor:
    """
    Wrap the result of a forward computation into a tensor and register the backward rule with the active record
    if any input requires a gradient.

    Parameters
    ----------
    op: str
        The name of the operation, used in diagnostics
    data: np.ndarray
        The forward result
    inputs: Sequence of Tensor
        The tensor operands in the order the backward rule returns their gradients
    backward: BackwardRule
        Maps the output gradient to a sequence of input gradients. Entries may be None for inputs that do not
        require a gradient.

    Returns
    -------
    Tensor
        The output tensor
    """
    data = np.asarray(data)
    if _state.debug:
        _check_finite(op, inputs, data)
    needs_grad = _state.grad_enabled and any(tensor.requires_grad for tensor in inputs)
    output = Tensor(data, requires_grad=needs_grad, dtype=data.dtype)
    if needs_grad:
        record = current_record()
        record.append(
            Node(
                op=op,
                input_ids=tuple(tensor.node_id for tensor in inputs),
                output_id=output.node_id,
                inputs=tuple(inputs),
                output=output,
                backward=backward,
            )
        )
        output._record = record  # pylint: disable=protected-access
    return output


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=None if like is None else like.dtype)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """
    Sum a gradient over the axes that broadcasting added or stretched, so that it matches `shape` again.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_pair(op: str, a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        b = as_tensor(b, a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast") from None
    return a, b


def add(a: Any, b: Any) -> Tensor:
    a, b = _broadcast_pair("add", a, b)
    return record_op(
        "add", a.data + b.data, (a, b), lambda grad: (unbroadcast(grad, a.shape), unbroadcast(grad, b.shape))
    )


def subtract(a: Any, b: Any) -> Tensor:
    a, b = _broadcast_pair("subtract", a, b)
    return record_op(
        "subtract", a.data - b.data, (a, b), lambda grad: (unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape))
    )


def multiply(a: Any, b: Any) -> Tensor:
    a, b = _broadcast_pair("multiply", a, b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        return (
            unbroadcast(grad * b.data, a.shape) if a.requires_grad else None,
            unbroadcast(grad * a.data, b.shape) if b.requires_grad else None,
        )

    return record_op("multiply", a.data * b.data, (a, b), backward)


def divide(a: Any, b: Any) -> Tensor:
    a, b = _broadcast_pair("divide", a, b)

    def backward(grad: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        return (
            unbroadcast(grad / b.data, a.shape) if a.requires_grad else None,
            unbroadcast(-grad * a.data / (b.data * b.data), b.shape) if b.requires_grad else None,
        )

    return record_op("divide", a.data / b.data, (a, b), backward)


def negative(a: Tensor) -> Tensor:
    return record_op("negative", -a.data, (a,), lambda grad: (-grad,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return record_op(
        "power", a.data**exponent, (a,), lambda grad: (grad * exponent * a.data ** (exponent - 1.0),)
    )


def relu(a: Tensor) -> Tensor:
    return record_op("relu", np.maximum(a.data, 0), (a,), lambda grad: (grad * (a.data > 0),))


def tanh(a: Tensor) -> Tensor:
    result = np.tanh(a.data)
    return record_op("tanh", result, (a,), lambda grad: (grad * (1 - result * result),))


def sigmoid(a: Tensor) -> Tensor:
    result = expit(a.data)
    return record_op("sigmoid", result, (a,), lambda grad: (grad * result * (1 - result),))


def exp(a: Tensor) -> Tensor:
    result = np.exp(a.data)
    return record_op("exp", result, (a,), lambda grad: (grad * result,))


def log(a: Tensor) -> Tensor:
    return record_op("log", np.log(a.data), (a,), lambda grad: (grad / a.data,))


def matmul(a: Any, b: Any) -> Tensor:
    """
    Matrix product over the last two axes, leading axes are broadcast.
    """
    if isinstance(a, Tensor):
        b = as_tensor(b, a)
    else:
        b = as_tensor(b)
        a = as_tensor(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatchError(f"matmul: batch shapes of {a.shape} and {b.shape} cannot be broadcast") from None

    def backward(grad: np.ndarray) -> tuple[np.ndarray | None, np.ndarray | None]:
        return (
            unbroadcast(grad @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None,
            unbroadcast(np.swapaxes(a.data, -1, -2) @ grad, b.shape) if b.requires_grad else None,
        )

    return record_op("matmul", a.data @ b.data, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeMismatchError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return record_op("transpose", a.data.transpose(axes), (a,), lambda grad: (grad.transpose(inverse),))


def swapaxes(a: Tensor, axis1: int, axis2: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        result = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return record_op("reshape", result, (a,), lambda grad: (grad.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: at least one tensor is required")
    try:
        result = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(tensor.shape) for tensor in tensors)
        raise ShapeMismatchError(f"concat: shapes {shapes} do not match along axis {axis}") from None
    boundaries = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]
    return record_op("concat", result, tuple(tensors), lambda grad: tuple(np.split(grad, boundaries, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack: at least one tensor is required")
    try:
        result = np.stack([tensor.data for tensor in tensors], axis=axis)
    except ValueError:
        shapes = ", ".join(str(tensor.shape) for tensor in tensors)
        raise ShapeMismatchError(f"stack: shapes {shapes} differ") from None
    return record_op(
        "stack",
        result,
        tuple(tensors),
        lambda grad: tuple(np.take(grad, i, axis=axis) for i in range(len(tensors))),
    )


def _is_basic_index(index: Index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(item, (int, np.integer, slice)) or item is None or item is Ellipsis for item in items)


def getitem(a: Tensor, index: Index) -> Tensor:
    """
    Slicing and gather. Repeated indices accumulate their gradients.
    """
    try:
        result = a.data[index]
    except IndexError as exc:
        raise ShapeMismatchError(f"getitem: index is invalid for shape {a.shape}: {exc}") from None
    basic = _is_basic_index(index)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        if basic:
            full[index] += grad
        else:
            np.add.at(full, index, grad)
        return (full,)

    return record_op("getitem", result, (a,), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        result = np.broadcast_to(a.data, tuple(shape))
    except ValueError:
        raise ShapeMismatchError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return record_op("broadcast_to", result, (a,), lambda grad: (unbroadcast(grad, a.shape),))


def _normalize_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, a.shape),)

    return record_op("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    Gather rows of a `(num_embeddings, dim)` table. The result has shape `ids.shape + (dim,)`.
    """
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeMismatchError(f"embedding: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids must lie in [0, {table.shape[0]})")

    def backward(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(table.data)
        np.add.at(full, ids, grad)
        return (full,)

    return record_op("embedding", table.data[ids], (table,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """
    Inverted dropout. The identity outside of training or if `rate` is 0.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"dropout: rate must lie in [0, 1], got {rate}")
    if not training or rate == 0:
        return a
    if rng is None:
        raise ValueError("dropout: a random generator is required while training")
    scale = 0.0 if rate == 1 else 1.0 / (1.0 - rate)
    mask = (rng.random(a.shape) >= rate).astype(a.dtype) * a.dtype.type(scale)
    return record_op("dropout", a.data * mask, (a,), lambda grad: (grad * mask,))


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=_state.dtype), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape), dtype=_state.dtype), requires_grad=requires_grad)
