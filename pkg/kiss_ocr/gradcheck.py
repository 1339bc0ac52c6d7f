"""
Finite difference verification of every backward rule. Each registered case builds its inputs and a scalar
function of them in double precision. The analytic gradients are compared to central differences with the error
`max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)`.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from . import functional
from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .layers import LSTMCell, Parameter
from .localizer import AffineParams, LocalizerConfig, SamplingGrid, bilinear_sample, generate_grid, out_of_image_penalty
from .model import KissModel, ModelConfig
from .recognizer import DecoderLayer, EncoderLayer, MultiHeadAttention, TransformerConfig, causal_mask
from .tensor import ComputationRecord, Tensor, no_grad, precision
from .vocabulary import Vocabulary

ERROR_FLOOR = 1e-6

CaseBuilder = Callable[[np.random.Generator], tuple[Sequence[Parameter], Callable[[], Tensor]]]


class GradCheckCase(NamedTuple):
    name: str
    build: CaseBuilder
    tolerance: float
    step: float


class CaseResult(NamedTuple):
    name: str
    worst_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), ERROR_FLOOR)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(
    inputs: Sequence[Parameter],
    function: Callable[[], Tensor],
    step: float,
    rng: np.random.Generator,
    max_entries: int = 24,
) -> float:
    """
    Compare the back-propagated gradients of `function` with central differences for up to `max_entries`
    randomly chosen entries of every input.

    Returns
    -------
    float
        The worst error over all inputs
    """
    for parameter in inputs:
        parameter.grad = None
    with ComputationRecord() as record:
        record.backward(function())

    worst = 0.0
    for parameter in inputs:
        analytic = np.zeros(parameter.shape) if parameter.grad is None else parameter.grad
        original = parameter.data.copy()
        if parameter.size <= max_entries:
            entries = np.arange(parameter.size)
        else:
            entries = rng.choice(parameter.size, size=max_entries, replace=False)
        numeric = np.empty(len(entries))
        for position, entry in enumerate(entries):
            values = []
            for delta in (step, -step):
                perturbed = original.copy()
                perturbed.flat[entry] += delta
                parameter.assign(perturbed)
                with no_grad():
                    values.append(function().item())
            numeric[position] = (values[0] - values[1]) / (2 * step)
        parameter.assign(original)
        worst = max(worst, relative_error(analytic.reshape(-1)[entries], numeric))
    return worst


class GradCheckRegistry:
    """
    The cases by name. Use :data:`gradcheck_registry` for the built-in operations.
    """

    def __init__(self) -> None:
        self.__logger = logging.getLogger(__name__)
        self.__cases: dict[str, GradCheckCase] = {}

    def register(self, name: str, tolerance: float = 1e-4, step: float = 1e-3) -> Callable[[CaseBuilder], CaseBuilder]:
        def decorator(build: CaseBuilder) -> CaseBuilder:
            if name in self.__cases:
                raise ValueError(f"A gradient check named '{name}' is already registered")
            self.__cases[name] = GradCheckCase(name, build, tolerance, step)
            return build

        return decorator

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.__cases)

    def run(self, seed: int = 0, names: Iterable[str] | None = None) -> list[CaseResult]:
        """
        Run the selected cases, all by default, in double precision. A case that raises counts as failed.
        """
        selected = self.names if names is None else tuple(names)
        unknown = [name for name in selected if name not in self.__cases]
        if unknown:
            raise ValueError(f"Unknown gradient checks: {', '.join(unknown)}")
        results = []
        with precision(np.float64):
            for index, name in enumerate(selected):
                case = self.__cases[name]
                rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
                try:
                    inputs, function = case.build(rng)
                    error = check_gradients(inputs, function, case.step, rng)
                except Exception:  # pylint: disable=broad-except
                    self.__logger.exception("Gradient check '%s' raised an exception", name)
                    error = float("inf")
                if not np.isfinite(error):
                    error = float("inf")
                results.append(CaseResult(name, error, case.tolerance))
                self.__logger.debug("%s: worst error %.3g (tolerance %g)", name, error, case.tolerance)
        return results


def format_report(results: Sequence[CaseResult]) -> str:
    width = max((len(result.name) for result in results), default=0)
    lines = [
        f"{result.name:<{width}}  {result.worst_error:.3e}  < {result.tolerance:.0e}  {'ok' if result.passed else 'FAIL'}"
        for result in results
    ]
    return "\n".join(lines) + "\n"


gradcheck_registry = GradCheckRegistry()
register = gradcheck_registry.register


def _parameter(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0) -> Parameter:
    return Parameter(rng.uniform(low, high, shape))


def _away_from_zero(rng: np.random.Generator, *shape: int) -> Parameter:
    return Parameter(rng.choice((-1.0, 1.0), shape) * rng.uniform(0.1, 1.0, shape))


def _projection(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    return Tensor(rng.standard_normal(shape))


def _weighted_sum(rng: np.random.Generator, inputs: Sequence[Parameter], op: Callable[[], Tensor]):
    with no_grad():
        shape = op().shape
    weights = _projection(rng, shape)
    return inputs, lambda: (op() * weights).sum()


@register("add")
def _add(rng):
    a, b = _parameter(rng, 3, 4), _parameter(rng, 4)
    return _weighted_sum(rng, (a, b), lambda: a + b)


@register("subtract")
def _subtract(rng):
    a, b = _parameter(rng, 2, 3), _parameter(rng, 2, 1)
    return _weighted_sum(rng, (a, b), lambda: a - b)


@register("multiply")
def _multiply(rng):
    a, b = _parameter(rng, 3, 4), _parameter(rng, 3, 1)
    return _weighted_sum(rng, (a, b), lambda: a * b)


@register("divide")
def _divide(rng):
    a, b = _parameter(rng, 3, 4), _parameter(rng, 3, 4, low=0.5, high=2.0)
    return _weighted_sum(rng, (a, b), lambda: a / b)


@register("scalar_ops")
def _scalar_ops(rng):
    a = _parameter(rng, 2, 5)
    return _weighted_sum(rng, (a,), lambda: (2.5 * a - 1.0) / 3.0 + 1.0 - a * 0.5 + (-a) + 2.0 / (a + 3.0))


@register("power")
def _power(rng):
    a = _parameter(rng, 2, 5, low=0.5, high=2.0)
    return _weighted_sum(rng, (a,), lambda: a**3 + a**0.5)


@register("relu")
def _relu(rng):
    a = _away_from_zero(rng, 3, 4)
    return _weighted_sum(rng, (a,), lambda: T.relu(a))


@register("tanh")
def _tanh(rng):
    a = _parameter(rng, 3, 4, low=-2.0, high=2.0)
    return _weighted_sum(rng, (a,), lambda: T.tanh(a))


@register("sigmoid")
def _sigmoid(rng):
    a = _parameter(rng, 3, 4, low=-3.0, high=3.0)
    return _weighted_sum(rng, (a,), lambda: T.sigmoid(a))


@register("exp")
def _exp(rng):
    a = _parameter(rng, 3, 4)
    return _weighted_sum(rng, (a,), lambda: T.exp(a))


@register("log")
def _log(rng):
    a = _parameter(rng, 3, 4, low=0.5, high=2.0)
    return _weighted_sum(rng, (a,), lambda: T.log(a))


@register("matmul")
def _matmul(rng):
    a, b = _parameter(rng, 2, 3, 4), _parameter(rng, 4, 5)
    return _weighted_sum(rng, (a, b), lambda: a @ b)


@register("transpose")
def _transpose(rng):
    a = _parameter(rng, 2, 3, 4)
    return _weighted_sum(rng, (a,), lambda: T.transpose(a, (2, 0, 1)))


@register("reshape")
def _reshape(rng):
    a = _parameter(rng, 2, 3, 4)
    return _weighted_sum(rng, (a,), lambda: a.reshape(4, 6))


@register("concat")
def _concat(rng):
    a, b = _parameter(rng, 2, 3), _parameter(rng, 2, 2)
    return _weighted_sum(rng, (a, b), lambda: T.concat([a, b, a], axis=1))


@register("stack")
def _stack(rng):
    a, b = _parameter(rng, 2, 3), _parameter(rng, 2, 3)
    return _weighted_sum(rng, (a, b), lambda: T.stack([a, b], axis=1))


@register("slice")
def _slice(rng):
    a = _parameter(rng, 4, 5)
    return _weighted_sum(rng, (a,), lambda: T.concat([a[1:3, ::2], a[[0, 2, 0]][:, :3]], axis=0))


@register("broadcast")
def _broadcast(rng):
    a = _parameter(rng, 3, 1)
    return _weighted_sum(rng, (a,), lambda: T.broadcast_to(a, (2, 3, 4)))


@register("sum")
def _sum(rng):
    a = _parameter(rng, 2, 3, 4)
    return _weighted_sum(rng, (a,), lambda: a.sum(axis=1))


@register("mean")
def _mean(rng):
    a = _parameter(rng, 2, 3, 4)
    return _weighted_sum(rng, (a,), lambda: a.mean(axis=(0, 2), keepdims=True))


@register("embedding")
def _embedding(rng):
    table = _parameter(rng, 6, 4)
    ids = np.array([[0, 3, 3], [5, 0, 1]])
    return _weighted_sum(rng, (table,), lambda: T.embedding(table, ids))


@register("dropout")
def _dropout(rng):
    a = _parameter(rng, 4, 5)
    return _weighted_sum(rng, (a,), lambda: T.dropout(a, 0.3, np.random.default_rng(7), training=True))


@register("conv2d")
def _conv2d(rng):
    image, weight, bias = _parameter(rng, 1, 2, 5, 5), _parameter(rng, 3, 2, 3, 3), _parameter(rng, 3)
    return _weighted_sum(rng, (image, weight, bias), lambda: functional.conv2d(image, weight, bias, padding=1))


@register("conv2d_strided")
def _conv2d_strided(rng):
    image, weight = _parameter(rng, 2, 2, 6, 5), _parameter(rng, 4, 2, 3, 3)
    return _weighted_sum(rng, (image, weight), lambda: functional.conv2d(image, weight, stride=2, padding=1))


@register("group_norm")
def _group_norm(rng):
    image, gamma, beta = _parameter(rng, 2, 4, 3, 3), _parameter(rng, 4), _parameter(rng, 4)
    return _weighted_sum(rng, (image, gamma, beta), lambda: functional.group_norm(image, 2, gamma, beta))


@register("layer_norm")
def _layer_norm(rng):
    values, gamma, beta = _parameter(rng, 2, 3, 6), _parameter(rng, 6), _parameter(rng, 6)
    return _weighted_sum(rng, (values, gamma, beta), lambda: functional.layer_norm(values, gamma, beta))


@register("softmax")
def _softmax(rng):
    logits = _parameter(rng, 2, 4, 4, low=-2.0, high=2.0)
    return _weighted_sum(rng, (logits,), lambda: functional.softmax(logits, mask=causal_mask(4)))


@register("log_softmax")
def _log_softmax(rng):
    logits = _parameter(rng, 3, 5, low=-2.0, high=2.0)
    return _weighted_sum(rng, (logits,), lambda: functional.log_softmax(logits))


@register("softmax_cross_entropy")
def _softmax_cross_entropy(rng):
    logits = _parameter(rng, 2, 5, low=-2.0, high=2.0)
    targets = np.array([1, 4])
    return (logits,), lambda: functional.softmax_cross_entropy(logits, targets)


@register("lstm_cell")
def _lstm_cell(rng):
    cell = LSTMCell(3, 4, rng)
    values, hidden, state = _parameter(rng, 2, 3), _parameter(rng, 2, 4), _parameter(rng, 2, 4)
    inputs = (values, hidden, state, cell.x2h.weight, cell.h2h.bias)

    def step() -> Tensor:
        new_hidden, new_state = cell(values, (hidden, state))
        return T.concat([new_hidden, new_state], axis=1)

    return _weighted_sum(rng, inputs, step)


@register("spatial_sampler", tolerance=1e-3, step=1e-5)
def _spatial_sampler(rng):
    theta = Parameter(np.array([[[[0.8, 0.15, 0.05], [-0.1, 0.7, 0.1]], [[0.5, -0.2, -0.3], [0.25, 0.9, -0.05]]]]))
    theta.assign(theta.data + rng.uniform(-0.05, 0.05, theta.shape))
    image = _parameter(rng, 1, 1, 5, 5)

    def sample() -> Tensor:
        return bilinear_sample(image, generate_grid(AffineParams(theta), (4, 3)))

    return _weighted_sum(rng, (theta, image), sample)


@register("out_of_image_penalty")
def _out_of_image_penalty(rng):
    shape = (1, 2, 2, 3, 2)
    magnitude = np.where(rng.random(shape) < 0.5, rng.uniform(0.0, 0.9, shape), rng.uniform(1.1, 2.0, shape))
    coords = Parameter(rng.choice((-1.0, 1.0), magnitude.shape) * magnitude)
    return (coords,), lambda: out_of_image_penalty(SamplingGrid(coords, (3, 2)))


@register("attention")
def _attention(rng):
    attention = MultiHeadAttention(8, 2, rng)
    query, key, value = _parameter(rng, 2, 4, 8), _parameter(rng, 2, 4, 8), _parameter(rng, 2, 4, 8)
    inputs = (query, key, value, attention.query.weight, attention.output.bias)
    return _weighted_sum(rng, inputs, lambda: attention(query, key, value, causal_mask(4)))


@register("encoder_layer", step=1e-5)
def _encoder_layer(rng):
    layer = EncoderLayer(TransformerConfig(d_model=8, n_heads=2, d_ff=16, dropout=0.0), rng).eval()
    values = _parameter(rng, 2, 5, 8)
    inputs = (values, layer.self_attention.key.weight, layer.feed_forward.expand.weight, layer.attention_norm.gamma)
    return _weighted_sum(rng, inputs, lambda: layer(values))


@register("decoder_layer", step=1e-5)
def _decoder_layer(rng):
    layer = DecoderLayer(TransformerConfig(d_model=8, n_heads=2, d_ff=16, dropout=0.0), rng).eval()
    values, memory = _parameter(rng, 2, 4, 8), _parameter(rng, 2, 6, 8)
    inputs = (values, memory, layer.cross_attention.value.weight, layer.feed_forward.contract.weight)
    return _weighted_sum(rng, inputs, lambda: layer(values, memory))


@register("backbone", step=1e-5)
def _backbone(rng):
    backbone = Backbone(BackboneConfig((4,), (2,), (6, 6), norm_groups=2), rng)
    image = _parameter(rng, 2, 1, 6, 6)
    first, second = backbone.blocks
    inputs = (image, backbone.stem.weight, first.conv1.weight, first.projection.weight, second.conv2.weight)
    return _weighted_sum(rng, inputs, lambda: backbone(image).tensor)


@register("end_to_end", tolerance=1e-3, step=1e-6)
def _end_to_end(rng):
    config = ModelConfig(
        image_size=(12, 8),
        stage_channels=(4,),
        blocks_per_stage=(1,),
        norm_groups=2,
        localizer=LocalizerConfig(n_rois=3, roi_size=(4, 6), lstm_hidden=5, rotation_dropout=0.0),
        transformer=TransformerConfig(d_model=8, n_heads=2, d_ff=16, dropout=0.0),
    )
    vocabulary = Vocabulary()
    model = KissModel(config, vocabulary, rng).eval()
    images = Tensor(rng.uniform(0.0, 1.0, (2, 1, 8, 12)))
    targets = np.stack([vocabulary.encode(text, 3).ids for text in ("A", "B1")])
    head = model.localizer.head
    return (head.weight, head.bias), lambda: model.loss(images, targets).total
