"""
Dataset storage: one directory of binary PGM (P5) images, a `labels.tsv` file with `filename<TAB>label` lines and a
`dataset.meta` file of `key = value` lines.
"""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .vocabulary import MAX_LABEL_LENGTH, Vocabulary

LABELS_FILE = "labels.tsv"
META_FILE = "dataset.meta"
_PGM_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


class DatasetError(OSError):
    """
    Raised if a dataset or an image is missing, unreadable or malformed
    """


class Sample(NamedTuple):
    image: np.ndarray  # uint8, (H, W)
    label: str


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8 or not image.size:
        raise ValueError(f"Only non-empty 8-bit grayscale images can be stored, got {image.dtype} {image.shape}")
    height, width = image.shape
    try:
        with open(path, "wb") as file:
            file.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            file.write(np.ascontiguousarray(image).tobytes())
    except OSError as exc:
        raise DatasetError(f"Cannot write image '{path}': {exc}") from exc


def read_pgm(path: str | Path) -> np.ndarray:
    """
    Read a binary 8-bit PGM file into a `(H, W)` uint8 array.
    """
    try:
        with open(path, "rb") as file:
            data = file.read()
    except OSError as exc:
        raise DatasetError(f"Cannot read image '{path}': {exc}") from exc
    match = _PGM_HEADER.match(data)
    if match is None:
        raise DatasetError(f"'{path}' is not a binary PGM (P5) file")
    width, height, max_value = (int(value) for value in match.groups())
    if max_value > 255 or not width or not height:
        raise DatasetError(f"'{path}' has an unsupported geometry {width}x{height} or maximum value {max_value}")
    pixels = data[match.end() : match.end() + width * height]
    if len(pixels) != width * height:
        raise DatasetError(f"'{path}' is truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def write_meta(path: str | Path, meta: dict[str, object]) -> None:
    lines = [f"{key} = {value}" for key, value in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path: str | Path) -> dict[str, str]:
    """
    Parse `key = value` lines. Empty lines and lines starting with `#` are skipped.
    """
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, separator, value = line.partition("=")
        if not separator:
            raise ValueError(f"Invalid line in '{path}': {line!r}")
        meta[key.strip()] = value.strip()
    return meta


def write_dataset(
    directory: str | Path, samples: Iterable[Sample], meta: dict[str, object] | None = None
) -> Path:
    """
    Store the samples as `000000.pgm`, `000001.pgm`, ... together with the label and meta files. The output only
    depends on the samples and `meta`.

    Returns
    -------
    Path
        The dataset directory
    """
    logger = logging.getLogger(__name__)
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        lines = []
        for index, sample in enumerate(samples):
            filename = f"{index:06d}.pgm"
            write_pgm(directory / filename, sample.image)
            lines.append(f"{filename}\t{sample.label}\n")
        (directory / LABELS_FILE).write_text("".join(lines), encoding="utf-8")
        write_meta(directory / META_FILE, {"count": len(lines), **(meta or {})})
    except OSError as exc:
        raise DatasetError(f"Cannot write dataset to '{directory}': {exc}") from exc
    logger.info("Wrote %i samples to '%s'", len(lines), directory)
    return directory


def read_dataset(directory: str | Path, vocabulary: Vocabulary | None = None) -> list[Sample]:
    """
    Load all samples listed in `labels.tsv`. Labels are validated against the vocabulary.
    """
    directory = Path(directory)
    vocabulary = Vocabulary() if vocabulary is None else vocabulary
    labels_path = directory / LABELS_FILE
    if not labels_path.is_file():
        raise DatasetError(f"No dataset found in '{directory}', '{LABELS_FILE}' is missing")
    try:
        lines = labels_path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(f"Cannot read '{labels_path}': {exc}") from exc

    samples = []
    for number, line in enumerate(lines, start=1):
        if not line:
            continue
        filename, separator, label = line.partition("\t")
        if not separator or not 1 <= len(label) <= MAX_LABEL_LENGTH:
            raise DatasetError(f"{labels_path}:{number}: expected 'filename<TAB>label' with 1 to 23 characters")
        unknown = sorted({character for character in label if character not in vocabulary})
        if unknown:
            raise DatasetError(f"{labels_path}:{number}: unsupported characters {unknown} in label '{label}'")
        samples.append(Sample(read_pgm(directory / filename), label))
    return samples
