"""
The recognition network. Every ROI crop is turned into a feature vector by the recognition backbone. A transformer
encoder relates the vectors of one word to each other and an autoregressive decoder emits one character per step.
The softmax recognizer is the ablation that classifies every position independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, unique
from typing import NamedTuple

import numpy as np

from .backbone import Backbone, BackboneConfig, global_pool
from .functional import softmax, softmax_cross_entropy
from .layers import Embedding, LayerNorm, Linear, Module
from .tensor import ShapeMismatchError, Tensor, dropout, no_grad, relu, stack, swapaxes
from .vocabulary import MAX_LABEL_LENGTH, TokenSequence, Vocabulary


@unique
class RecognizerKind(Enum):
    TRANSFORMER = "transformer"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    n_layers: int = 1
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} must be divisible by the number of heads {self.n_heads}")
        if self.d_model % 2:
            raise ValueError(f"d_model must be even, got {self.d_model}")
        if self.d_ff < 1 or self.n_layers < 1:
            raise ValueError(f"Invalid feed-forward size {self.d_ff} or layer count {self.n_layers}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"The dropout rate must lie in [0, 1), got {self.dropout}")

    @classmethod
    def base(cls) -> TransformerConfig:
        """
        The dimensions of the original base transformer.
        """
        return cls(d_model=512, n_heads=8, d_ff=2048)


class DecodeResult(NamedTuple):
    text: str
    tokens: TokenSequence
    char_probs: np.ndarray

    @property
    def score(self) -> float:
        """
        The mean probability of the emitted characters, 0 for an empty word.
        """
        return float(np.mean(self.char_probs)) if len(self.char_probs) else 0.0


def positional_encoding(n_positions: int, d_model: int, dtype: type | None = None) -> Tensor:
    """
    `PE(n, 2i) = sin(n / 10000^(2i/d_model))` and `PE(n, 2i+1) = cos(n / 10000^(2i/d_model))`.
    """
    if d_model % 2:
        raise ValueError(f"positional_encoding: d_model must be even, got {d_model}")
    positions = np.arange(n_positions, dtype=np.float64)[:, None]
    divisor = np.exp(np.arange(0, d_model, 2, dtype=np.float64) / d_model * np.log(10000.0))
    encoding = np.zeros((n_positions, d_model))
    encoding[:, 0::2] = np.sin(positions / divisor)
    encoding[:, 1::2] = np.cos(positions / divisor)
    return Tensor(encoding, dtype=dtype)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


def scaled_dot_product_attention(
    query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """
    Returns the attended values and the attention weights.
    """
    scores = (query @ swapaxes(key, -1, -2)) * (1.0 / np.sqrt(query.shape[-1]))
    weights = softmax(scores, axis=-1, mask=mask)
    return weights @ value, weights


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.n_heads = n_heads
        self.query = Linear(d_model, d_model, rng)
        self.key = Linear(d_model, d_model, rng)
        self.value = Linear(d_model, d_model, rng)
        self.output = Linear(d_model, d_model, rng)

    def forward(
        self, query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None = None
    ) -> Tensor:
        return multi_head_attention(query, key, value, self.n_heads, mask, self)


def _split_heads(values: Tensor, n_heads: int) -> Tensor:
    batch, length, d_model = values.shape
    return values.reshape(batch, length, n_heads, d_model // n_heads).transpose(0, 2, 1, 3)


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    n_heads: int,
    mask: np.ndarray | None,
    params: MultiHeadAttention,
) -> Tensor:
    """
    Project the `(B, T, d_model)` inputs, attend per head on its slice of channels, concatenate the heads and
    project the result.
    """
    d_model = params.query.weight.shape[0]
    if d_model % n_heads:
        raise ShapeMismatchError(f"multi_head_attention: d_model {d_model} is not divisible by {n_heads} heads")
    for name, tensor in (("query", query), ("key", key), ("value", value)):
        if tensor.ndim != 3 or tensor.shape[-1] != d_model:
            raise ShapeMismatchError(f"multi_head_attention: {name} of shape {tensor.shape} does not match d_model {d_model}")
    if key.shape[1] != value.shape[1]:
        raise ShapeMismatchError(f"multi_head_attention: key {key.shape} and value {value.shape} lengths differ")
    if mask is not None and not np.array_equal(mask, np.tril(mask)):
        raise ValueError("multi_head_attention: the mask must be lower-triangular")

    batch, length = query.shape[:2]
    attended, _ = scaled_dot_product_attention(
        _split_heads(params.query(query), n_heads),
        _split_heads(params.key(key), n_heads),
        _split_heads(params.value(value), n_heads),
        mask,
    )
    return params.output(attended.transpose(0, 2, 1, 3).reshape(batch, length, d_model))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.expand = Linear(d_model, d_ff, rng)
        self.contract = Linear(d_ff, d_model, rng)

    def forward(self, values: Tensor) -> Tensor:
        return self.contract(relu(self.expand(values)))


class EncoderLayer(Module):
    """
    Self-attention and feed-forward sub-layers, each wrapped as `norm(x + dropout(sublayer(x)))`.
    """

    def __init__(self, config: TransformerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.dropout = config.dropout
        self.self_attention = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.attention_norm = LayerNorm(config.d_model)
        self.feed_forward = FeedForward(config.d_model, config.d_ff, rng)
        self.feed_forward_norm = LayerNorm(config.d_model)

    def forward(self, values: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        attended = self.self_attention(values, values, values)
        values = self.attention_norm(values + dropout(attended, self.dropout, rng, self.training))
        return self.feed_forward_norm(values + dropout(self.feed_forward(values), self.dropout, rng, self.training))


class DecoderLayer(Module):
    def __init__(self, config: TransformerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.dropout = config.dropout
        self.self_attention = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.self_attention_norm = LayerNorm(config.d_model)
        self.cross_attention = MultiHeadAttention(config.d_model, config.n_heads, rng)
        self.cross_attention_norm = LayerNorm(config.d_model)
        self.feed_forward = FeedForward(config.d_model, config.d_ff, rng)
        self.feed_forward_norm = LayerNorm(config.d_model)

    def forward(self, values: Tensor, memory: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        mask = causal_mask(values.shape[1])
        attended = self.self_attention(values, values, values, mask)
        values = self.self_attention_norm(values + dropout(attended, self.dropout, rng, self.training))
        attended = self.cross_attention(values, memory, memory)
        values = self.cross_attention_norm(values + dropout(attended, self.dropout, rng, self.training))
        return self.feed_forward_norm(values + dropout(self.feed_forward(values), self.dropout, rng, self.training))


class RoiEncoder(Module):
    """
    Recognition backbone, global pooling and a projection to `d_model`, applied to every crop independently.
    """

    def __init__(self, backbone_config: BackboneConfig, d_model: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.backbone = Backbone(backbone_config, rng)
        self.projection = Linear(backbone_config.out_channels, d_model, rng)

    def forward(self, crops: Tensor, batch_size: int) -> Tensor:
        features = self.projection(global_pool(self.backbone(crops)))
        if features.shape[0] % batch_size:
            raise ShapeMismatchError(f"{features.shape[0]} crops cannot be split into {batch_size} samples")
        return features.reshape(batch_size, features.shape[0] // batch_size, features.shape[1])


class TransformerRecognizer(Module):
    KIND = RecognizerKind.TRANSFORMER

    def __init__(
        self,
        backbone_config: BackboneConfig,
        config: TransformerConfig,
        n_rois: int,
        vocabulary: Vocabulary,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        self.config = config
        self.n_rois = n_rois
        self.vocabulary = vocabulary
        self.roi_encoder = RoiEncoder(backbone_config, config.d_model, rng)
        self.encoder_layers = [EncoderLayer(config, rng) for _ in range(config.n_layers)]
        # one extra row for the begin-of-sequence token
        self.embedding = Embedding(len(vocabulary) + 1, config.d_model, rng)
        self.decoder_layers = [DecoderLayer(config, rng) for _ in range(config.n_layers)]
        self.classifier = Linear(config.d_model, len(vocabulary), rng)

    def logits(
        self, crops: Tensor, batch_size: int, targets: np.ndarray, rng: np.random.Generator | None = None
    ) -> Tensor:
        """
        Teacher forced logits of shape `(B, N, classes)`. The decoder consumes BOS followed by all but the last
        target.
        """
        memory = encode(self.roi_encoder(crops, batch_size), self, rng)
        bos = np.full((batch_size, 1), self.vocabulary.bos_id, dtype=np.int64)
        prefix = np.concatenate([bos, np.asarray(targets)[:, : self.n_rois - 1]], axis=1)
        return decode_step(prefix, memory, self, rng)

    def predict(self, crops: Tensor, batch_size: int) -> list[DecodeResult]:
        with no_grad():
            memory = encode(self.roi_encoder(crops, batch_size), self)
        return greedy_decode(memory, self, self.n_rois)


def encode(roi_features: Tensor, recognizer: TransformerRecognizer, rng: np.random.Generator | None = None) -> Tensor:
    """
    Add the positional encoding to the `(B, N, d_model)` region features and run the encoder layers.
    """
    d_model = recognizer.config.d_model
    if roi_features.ndim != 3 or roi_features.shape[-1] != d_model:
        raise ShapeMismatchError(f"encode: expected features of shape (B, N, {d_model}), got {roi_features.shape}")
    values = roi_features + positional_encoding(roi_features.shape[1], d_model, roi_features.dtype)
    for layer in recognizer.encoder_layers:
        values = layer(values, rng)
    return values


def decode_step(
    prev_tokens: np.ndarray,
    memory: Tensor,
    recognizer: TransformerRecognizer,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """
    Logits of shape `(B, t, classes)` for a `(B, t)` prefix of token ids that starts with BOS.
    """
    prev_tokens = np.asarray(prev_tokens)
    if prev_tokens.ndim != 2 or prev_tokens.shape[1] < 1:
        raise ShapeMismatchError(f"decode_step: expected a non-empty (B, t) prefix, got shape {prev_tokens.shape}")
    if prev_tokens.shape[1] > recognizer.n_rois:
        raise ValueError(f"decode_step: prefix of length {prev_tokens.shape[1]} exceeds {recognizer.n_rois}")
    d_model = recognizer.config.d_model
    values = recognizer.embedding(prev_tokens) * float(np.sqrt(d_model))
    values = values + positional_encoding(prev_tokens.shape[1], d_model, values.dtype)
    for layer in recognizer.decoder_layers:
        values = layer(values, memory, rng)
    return recognizer.classifier(values)


def _probabilities(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def greedy_decode(
    memory: Tensor, recognizer: TransformerRecognizer, max_len: int = MAX_LABEL_LENGTH
) -> list[DecodeResult]:
    """
    Feed the argmax back into the decoder until every word emitted a blank or `max_len` steps were taken.
    """
    if not 1 <= max_len <= recognizer.n_rois:
        raise ValueError(f"greedy_decode: max_len must lie in [1, {recognizer.n_rois}], got {max_len}")
    vocabulary = recognizer.vocabulary
    batch = memory.shape[0]
    tokens = np.full((batch, 1), vocabulary.bos_id, dtype=np.int64)
    ids = np.full((batch, recognizer.n_rois), vocabulary.blank_id, dtype=np.int64)
    probs = np.zeros((batch, max_len))
    lengths = np.zeros(batch, dtype=np.int64)
    finished = np.zeros(batch, dtype=bool)
    with no_grad():
        for step in range(max_len):
            last = _probabilities(decode_step(tokens, memory, recognizer).data[:, -1])
            best = last.argmax(axis=-1)
            finished |= best == vocabulary.blank_id
            active = ~finished
            ids[active, step] = best[active]
            probs[active, step] = last[active, best[active]]
            lengths[active] += 1
            if finished.all():
                break
            tokens = np.concatenate([tokens, best[:, None]], axis=1)
    return [
        DecodeResult(vocabulary.decode(ids[i]), TokenSequence(ids[i]), probs[i, : lengths[i]]) for i in range(batch)
    ]


def recognition_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Mean cross-entropy over all positions, the blank padding included.
    """
    return softmax_cross_entropy(logits, targets)


class SoftmaxRecognizer(Module):
    """
    Classifies every position independently. Position i has its own linear softmax head that only sees the features
    of region i.
    """

    KIND = RecognizerKind.SOFTMAX

    def __init__(
        self,
        backbone_config: BackboneConfig,
        config: TransformerConfig,
        n_rois: int,
        vocabulary: Vocabulary,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        self.config = config
        self.n_rois = n_rois
        self.vocabulary = vocabulary
        self.roi_encoder = RoiEncoder(backbone_config, config.d_model, rng)
        self.heads = [Linear(config.d_model, len(vocabulary), rng) for _ in range(n_rois)]

    def logits(
        self, crops: Tensor, batch_size: int, targets: np.ndarray | None = None, rng: np.random.Generator | None = None
    ) -> Tensor:
        del targets, rng
        features = self.roi_encoder(crops, batch_size)
        return stack([head(features[:, i]) for i, head in enumerate(self.heads)], axis=1)

    def predict(self, crops: Tensor, batch_size: int) -> list[DecodeResult]:
        with no_grad():
            probabilities = _probabilities(self.logits(crops, batch_size).data)
        results = []
        for sample in probabilities:
            ids = sample.argmax(axis=-1)
            text = self.vocabulary.decode(ids)
            padded = np.full(self.n_rois, self.vocabulary.blank_id, dtype=np.int64)
            padded[: len(text)] = ids[: len(text)]
            results.append(DecodeResult(text, TokenSequence(padded), sample[np.arange(len(text)), ids[: len(text)]]))
        return results
