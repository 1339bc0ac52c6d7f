"""
Trainable building blocks. A :class:`Module` owns :class:`Parameter` tensors and child modules as plain attributes,
which are discovered by :meth:`Module.named_parameters` in attribute order.
"""

from __future__ import annotations

from typing import Any, Iterator

import numpy as np

from .functional import conv2d, group_norm, layer_norm
from .tensor import ShapeMismatchError, Tensor, default_dtype, embedding, sigmoid, tanh

try:
    from typing import Self  # type: ignore # Python 3.11
except ImportError:
    from typing_extensions import Self


class Parameter(Tensor):
    """
    A tensor that always requires a gradient and may be reassigned by an optimizer.
    """

    def __init__(self, data: Any, dtype: type | None = None) -> None:
        super().__init__(data, requires_grad=True, dtype=dtype)

    def assign(self, values: np.ndarray) -> None:
        values = np.asarray(values)
        if values.shape != self.shape:
            raise ShapeMismatchError(f"assign: expected shape {self.shape}, got {values.shape}")
        self._data = np.array(values, dtype=self.dtype)


class Module:
    def __init__(self) -> None:
        self.training = True

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, Module]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """
        Yields the parameters of this module and all its children with dotted names like `stages.0.conv1.weight`.
        """
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [parameter for _, parameter in self.named_parameters()]

    def train(self, mode: bool = True) -> Self:
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Self:
        return self.train(False)

    def zero_grad(self) -> None:
        for parameter in self.parameters():
            parameter.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: parameter.data.copy() for name, parameter in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """
        Copy the values of `state` into the parameters. Every parameter must be present with an identical shape.
        """
        parameters = dict(self.named_parameters())
        missing = sorted(set(parameters) - set(state))
        unexpected = sorted(set(state) - set(parameters))
        if missing or unexpected:
            raise KeyError(f"State does not match the module. Missing: {missing}, unexpected: {unexpected}")
        for name, parameter in parameters.items():
            if state[name].shape != parameter.shape:
                raise ShapeMismatchError(
                    f"Parameter '{name}' has shape {parameter.shape}, the state holds {state[name].shape}"
                )
        for name, parameter in parameters.items():
            parameter.assign(state[name])


def _uniform(rng: np.random.Generator, bound: float, shape: tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-bound, bound, shape).astype(default_dtype())


class Linear(Module):
    """
    `y = x @ weight + bias` with weights drawn from U(-1/sqrt(in), 1/sqrt(in)).
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True) -> None:
        super().__init__()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(_uniform(rng, bound, (in_features, out_features)))
        self.bias = Parameter(_uniform(rng, bound, (out_features,))) if bias else None

    def forward(self, values: Tensor) -> Tensor:
        result = values @ self.weight
        return result if self.bias is None else result + self.bias


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = False,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        # He initialization for ReLU networks
        self.weight = Parameter(
            (rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * np.sqrt(2.0 / fan_in)).astype(
                default_dtype()
            )
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=default_dtype())) if bias else None

    def forward(self, image: Tensor) -> Tensor:
        return conv2d(image, self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5) -> None:
        super().__init__()
        if channels % groups:
            raise ShapeMismatchError(f"GroupNorm: {channels} channels cannot be split into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=default_dtype()))

    def forward(self, image: Tensor) -> Tensor:
        return group_norm(image, self.groups, self.gamma, self.beta, self.eps)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(features, dtype=default_dtype()))
        self.beta = Parameter(np.zeros(features, dtype=default_dtype()))

    def forward(self, values: Tensor) -> Tensor:
        return layer_norm(values, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.weight = Parameter((rng.standard_normal((num_embeddings, dim)) * dim**-0.5).astype(default_dtype()))

    def forward(self, ids: np.ndarray) -> Tensor:
        return embedding(self.weight, ids)


class LSTMCell(Module):
    """
    A single LSTM step. The input and hidden projections produce the input, forget, cell and output gates in this
    order.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.hidden_size = hidden_size
        self.x2h = Linear(input_size, 4 * hidden_size, rng)
        self.h2h = Linear(hidden_size, 4 * hidden_size, rng)

    def forward(self, values: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        hidden, cell = state
        gates = self.x2h(values) + self.h2h(hidden)
        size = self.hidden_size
        input_gate = sigmoid(gates[:, 0:size])
        forget_gate = sigmoid(gates[:, size : 2 * size])
        cell_gate = tanh(gates[:, 2 * size : 3 * size])
        output_gate = sigmoid(gates[:, 3 * size : 4 * size])
        cell = cell * forget_gate + input_gate * cell_gate
        return output_gate * tanh(cell), cell
