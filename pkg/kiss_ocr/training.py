"""
Training and evaluation. A training step minimizes cross-entropy plus the out-of-image penalty with RAdam, the
gradients of the localizer are clipped. The learning rate decays by a constant factor at every epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence, TextIO

import numpy as np

from .augment import AugmentPolicy, augment_train
from .checkpoint import save_checkpoint
from .dataset import Sample
from .model import KissModel, images_to_tensor, recognize_images
from .optim import RAdam, clip_grad_norm, learning_rate_for_epoch
from .tensor import ComputationRecord, Tensor, no_grad


class TrainingDivergedError(ArithmeticError):
    """
    Raised if a loss component becomes NaN or infinite
    """


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 3
    lr: float = 1e-4
    lr_decay_per_epoch: float = 0.1
    localizer_clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError(f"Invalid batch size {self.batch_size} or epoch count {self.epochs}")
        if self.lr <= 0 or self.localizer_clip_norm <= 0:
            raise ValueError(f"Invalid learning rate {self.lr} or clipping norm {self.localizer_clip_norm}")
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ValueError(f"The learning rate decay must lie in (0, 1], got {self.lr_decay_per_epoch}")
        if self.seed < 0:
            raise ValueError(f"The seed must not be negative, got {self.seed}")


class StepResult(NamedTuple):
    loss: float
    cross_entropy: float
    penalty: float
    lr: float

    def to_log_line(self, step: int) -> str:
        return f"{step}\t{self.loss:.6f}\t{self.cross_entropy:.6f}\t{self.penalty:.6f}\t{self.lr:.6g}\n"


class EvalReport(NamedTuple):
    sequence_accuracy: float
    char_accuracy: float
    cross_entropy: float
    penalty: float
    count: int

    def to_tsv(self) -> str:
        """
        A header line and a value line, tab separated.
        """
        header = "\t".join(self._fields)
        values = "\t".join(str(value) if isinstance(value, int) else f"{value:.6f}" for value in self)
        return f"{header}\n{values}\n"


def _check_finite(name: str, value: Tensor) -> None:
    if not np.all(np.isfinite(value.data)):
        raise TrainingDivergedError(f"The {name} is not finite ({value.item()})")


def train_step(
    model: KissModel,
    optimizer: RAdam,
    images: Tensor,
    targets: np.ndarray,
    config: TrainConfig,
    rng: np.random.Generator,
) -> StepResult:
    """
    Forward both networks with teacher forcing, back-propagate `cross-entropy + penalty`, clip the localizer
    gradients and update all parameters.
    """
    model.train()
    optimizer.zero_grad()
    with ComputationRecord() as record:
        terms = model.loss(images, targets, rng)
        _check_finite("cross-entropy", terms.cross_entropy)
        _check_finite("out-of-image penalty", terms.penalty)
        record.backward(terms.total)
    localizer_parameters = model.localizer_parameters()
    if localizer_parameters:
        clip_grad_norm(localizer_parameters, config.localizer_clip_norm)
    optimizer.step()
    return StepResult(terms.total.item(), terms.cross_entropy.item(), terms.penalty.item(), optimizer.lr)


def _batches(count: int, batch_size: int) -> list[slice]:
    return [slice(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]


def _normalize_case(text: str, case_insensitive: bool) -> str:
    return text.lower() if case_insensitive else text


def char_accuracy(prediction: str, label: str) -> float:
    """
    The fraction of positions of the longer string at which both strings agree.
    """
    length = max(len(prediction), len(label))
    if not length:
        return 1.0
    return sum(a == b for a, b in zip(prediction, label)) / length


def evaluate(
    model: KissModel,
    samples: Sequence[Sample],
    use_tta: bool = False,
    case_insensitive: bool = False,
    batch_size: int = 32,
) -> EvalReport:
    """
    Greedy decoding accuracy and the teacher forced loss components on a dataset.
    """
    if not samples:
        raise ValueError("Cannot evaluate an empty dataset")
    model.eval()
    vocabulary = model.vocabulary
    size = model.config.image_size
    exact = 0
    characters = 0.0
    cross_entropy = 0.0
    penalty = 0.0
    for batch in _batches(len(samples), batch_size):
        chunk = samples[batch]
        images = [sample.image for sample in chunk]
        labels = [sample.label for sample in chunk]
        with no_grad():
            targets = vocabulary.encode_batch(labels, model.config.localizer.n_rois)
            terms = model.loss(images_to_tensor(images, size), targets)
        cross_entropy += terms.cross_entropy.item() * len(chunk)
        penalty += terms.penalty.item() * len(chunk)
        for result, label in zip(recognize_images(model, images, use_tta), labels):
            prediction = _normalize_case(result.text, case_insensitive)
            label = _normalize_case(label, case_insensitive)
            exact += prediction == label
            characters += char_accuracy(prediction, label)
    count = len(samples)
    return EvalReport(exact / count, characters / count, cross_entropy / count, penalty / count, count)


class Trainer:
    """
    Runs the epochs, writes the step log and saves a checkpoint after every epoch plus the best one by validation
    sequence accuracy.
    """

    def __init__(
        self,
        model: KissModel,
        config: TrainConfig,
        augment_policy: AugmentPolicy,
        output_directory: str | Path,
        config_text: str = "",
    ) -> None:
        self.__logger = logging.getLogger(__name__)
        self.__model = model
        self.__config = config
        self.__augment_policy = augment_policy
        self.__output_directory = Path(output_directory)
        self.__config_text = config_text
        self.__rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        self.optimizer = RAdam(model.named_parameters(), lr=config.lr)
        self.step = 0
        self.best_accuracy = -1.0

    @property
    def log_path(self) -> Path:
        return self.__output_directory / "train.log"

    def _augmented_batch(self, samples: Sequence[Sample], indices: np.ndarray, epoch: int) -> list[Sample]:
        batch = []
        for index in indices:
            rng = np.random.default_rng(np.random.SeedSequence([self.__config.seed, epoch, int(index)]))
            batch.append(augment_train(samples[index], self.__augment_policy, rng))
        return batch

    def _save(self, name: str, epoch: int) -> Path:
        return save_checkpoint(
            self.__output_directory / name,
            self.__model,
            self.__model.vocabulary,
            self.__config_text,
            self.optimizer.state,
            {"epoch": epoch, "best_accuracy": self.best_accuracy},
        )

    def fit(self, train_samples: Sequence[Sample], val_samples: Sequence[Sample] = ()) -> list[StepResult]:
        """
        Train for the configured number of epochs.

        Returns
        -------
        list of StepResult
            One result per optimizer step
        """
        if not train_samples:
            raise ValueError("Cannot train on an empty dataset")
        config = self.__config
        vocabulary = self.__model.vocabulary
        size = self.__model.config.image_size
        n_rois = self.__model.config.localizer.n_rois
        self.__output_directory.mkdir(parents=True, exist_ok=True)
        results = []
        steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
        with open(self.log_path, "w", encoding="utf-8") as log:
            for epoch in range(config.epochs):
                self.optimizer.lr = learning_rate_for_epoch(config.lr, config.lr_decay_per_epoch, epoch)
                order = self.__rng.permutation(len(train_samples))
                for batch in _batches(len(train_samples), config.batch_size):
                    samples = self._augmented_batch(train_samples, order[batch], epoch)
                    result = train_step(
                        self.__model,
                        self.optimizer,
                        images_to_tensor([sample.image for sample in samples], size),
                        vocabulary.encode_batch([sample.label for sample in samples], n_rois),
                        config,
                        self.__rng,
                    )
                    self._log_step(log, result)
                    results.append(result)
                self.__logger.info(
                    "Epoch %(epoch)i finished after %(steps)i steps, last loss %(loss).4f",
                    {"epoch": epoch, "steps": steps_per_epoch, "loss": results[-1].loss},
                )
                self._end_epoch(epoch, val_samples)
        return results

    def _log_step(self, log: TextIO, result: StepResult) -> None:
        self.step += 1
        log.write(result.to_log_line(self.step))
        log.flush()
        self.__logger.debug(
            "Step %(step)i: loss %(loss).5f, cross-entropy %(ce).5f, penalty %(penalty).5f",
            {"step": self.step, "loss": result.loss, "ce": result.cross_entropy, "penalty": result.penalty},
        )

    def _end_epoch(self, epoch: int, val_samples: Sequence[Sample]) -> None:
        if val_samples:
            report = evaluate(self.__model, val_samples, batch_size=self.__config.batch_size)
            self.__logger.info(
                "Validation after epoch %(epoch)i: sequence accuracy %(accuracy).4f, penalty %(penalty).4f",
                {"epoch": epoch, "accuracy": report.sequence_accuracy, "penalty": report.penalty},
            )
            if report.sequence_accuracy > self.best_accuracy:
                self.best_accuracy = report.sequence_accuracy
                self._save("best.ckpt", epoch)
        self._save(f"epoch{epoch:03d}.ckpt", epoch)
