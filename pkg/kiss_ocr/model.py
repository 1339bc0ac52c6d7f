"""
The complete model: localizer and recognizer, assembled from the configured implementations, and the joint loss
`cross-entropy + out-of-image penalty`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple, Sequence

import numpy as np

from .augment import resize_keep_aspect, select_tta_prediction, tta_variants
from .backbone import BackboneConfig
from .layers import Module, Parameter
from .localizer import Localizer, LocalizerConfig, LocalizerKind, RegularCropper, RoiBatch, TransformerLocalizer
from .recognizer import (
    DecodeResult,
    RecognizerKind,
    SoftmaxRecognizer,
    TransformerConfig,
    TransformerRecognizer,
    recognition_loss,
)
from .tensor import Tensor, no_grad
from .vocabulary import Vocabulary


class ModelFactory:
    """
    Maps the kind of a sub-network to the class implementing it. Do not instantiate this, use the factories below.
    """

    def __init__(self) -> None:
        self.__available: dict[Any, type] = {}

    def register(self, implementation: type) -> None:
        """
        Register a new implementation with the factory
        """
        self.__available[implementation.KIND] = implementation  # type: ignore[attr-defined]

    def get(self, kind: Any, *args: Any, **kwargs: Any) -> Any:
        """
        Create a new instance of the implementation registered for `kind`
        """
        try:
            implementation = self.__available[kind]
        except KeyError:
            raise ValueError(f"No implementation available for {kind!s}") from None
        return implementation(*args, **kwargs)


localizer_factory = ModelFactory()
localizer_factory.register(Localizer)
localizer_factory.register(TransformerLocalizer)
localizer_factory.register(RegularCropper)

recognizer_factory = ModelFactory()
recognizer_factory.register(TransformerRecognizer)
recognizer_factory.register(SoftmaxRecognizer)


@dataclass(frozen=True)
class ModelConfig:
    """
    `image_size` is `(width, height)`. The localization backbone runs on the image, the recognition backbone on
    the crops, both share the stage layout.
    """

    image_size: tuple[int, int] = (200, 64)
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    norm_groups: int = 8
    localizer: LocalizerConfig = field(default_factory=LocalizerConfig)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    recognizer: RecognizerKind = RecognizerKind.TRANSFORMER
    recognition_only: bool = False

    @property
    def localizer_backbone(self) -> BackboneConfig:
        return BackboneConfig(
            self.stage_channels, self.blocks_per_stage, self.image_size, self.norm_groups, self.in_channels
        )

    @property
    def recognizer_backbone(self) -> BackboneConfig:
        return replace(self.localizer_backbone, input_size=self.localizer.roi_size)

    @property
    def localizer_kind(self) -> LocalizerKind:
        return LocalizerKind.REGULAR if self.recognition_only else self.localizer.kind


class LossTerms(NamedTuple):
    total: Tensor
    cross_entropy: Tensor
    penalty: Tensor
    rois: RoiBatch


class KissModel(Module):
    def __init__(self, config: ModelConfig, vocabulary: Vocabulary, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.vocabulary = vocabulary
        self.localizer = localizer_factory.get(config.localizer_kind, config.localizer_backbone, config.localizer, rng)
        self.recognizer = recognizer_factory.get(
            config.recognizer,
            config.recognizer_backbone,
            config.transformer,
            config.localizer.n_rois,
            vocabulary,
            rng,
        )

    def localizer_parameters(self) -> list[Parameter]:
        return self.localizer.parameters()

    def forward(
        self, images: Tensor, targets: np.ndarray, rng: np.random.Generator | None = None
    ) -> tuple[Tensor, RoiBatch]:
        """
        Teacher forced logits `(B, N, classes)` and the regions they were computed from.
        """
        rois = self.localizer(images, rng)
        return self.recognizer.logits(rois.crops, images.shape[0], targets, rng), rois

    def loss(self, images: Tensor, targets: np.ndarray, rng: np.random.Generator | None = None) -> LossTerms:
        logits, rois = self.forward(images, targets, rng)
        cross_entropy = recognition_loss(logits, targets)
        return LossTerms(cross_entropy + rois.reg_penalty, cross_entropy, rois.reg_penalty, rois)

    def predict(self, images: Tensor) -> list[DecodeResult]:
        """
        Greedy decoding of a batch of `(B, C, H, W)` images.
        """
        with no_grad():
            rois = self.localizer(images)
        return self.recognizer.predict(rois.crops, images.shape[0])


def images_to_tensor(images: Sequence[np.ndarray], size: tuple[int, int] = (200, 64)) -> Tensor:
    """
    Stack 8-bit grayscale images into a `(B, 1, H, W)` tensor in [0, 1], resizing those of a different size.
    """
    width, height = size
    batch = np.stack(
        [image if image.shape == (height, width) else resize_keep_aspect(image, size) for image in images]
    )
    return Tensor(batch[:, None].astype(np.float64) / 255.0)


def recognize_images(model: KissModel, images: Sequence[np.ndarray], use_tta: bool = False) -> list[DecodeResult]:
    """
    Decode raw 8-bit images. With test time augmentation every image is also decoded rotated in both directions
    and the most confident prediction is kept.
    """
    model.eval()
    size = model.config.image_size
    if not images:
        return []
    if not use_tta:
        return model.predict(images_to_tensor(images, size))
    variants = [tta_variants(image) for image in images]
    candidates = [
        model.predict(images_to_tensor([variant[index] for variant in variants], size)) for index in range(3)
    ]
    return [select_tta_prediction([candidate[i] for candidate in candidates]) for i in range(len(images))]
