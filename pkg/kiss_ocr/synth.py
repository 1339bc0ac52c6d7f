"""
Synthetic word images rendered with the built-in dot matrix font. Every sample is a pure function of the global seed
and its index, so datasets can be rendered in parallel and reproduced bit for bit.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .dataset import Sample
from .glyphs import FONT, GLYPH_HEIGHT, GLYPH_WIDTH, glyph
from .vocabulary import MAX_LABEL_LENGTH, Vocabulary, VocabularyError

DESK_CHARSET = "0123456789ABCDEF"
FULL_CHARSET = "".join(Vocabulary().characters)
# one blank column between two glyphs
GLYPH_ADVANCE = GLYPH_WIDTH + 1
MAX_ROTATION = 10.0


class WordLayout(NamedTuple):
    """
    Placement of a word on the canvas. `origin` is the top left corner `(x, y)` of the text box before the rotation
    about the canvas center.
    """

    text: str
    scale: int
    origin: tuple[int, int]
    angle: float
    background: float
    foreground: float
    noise_sigma: float

    @property
    def box(self) -> tuple[int, int, int, int]:
        """
        `(x, y, width, height)` of the unrotated text box.
        """
        width = (GLYPH_ADVANCE * len(self.text) - 1) * self.scale
        return self.origin[0], self.origin[1], width, GLYPH_HEIGHT * self.scale


def layout_word(text: str, canvas: tuple[int, int], rng: np.random.Generator) -> WordLayout:
    """
    Draw the scale, placement, rotation and intensities of a word.

    Parameters
    ----------
    text: str
        1 to 23 characters of the vocabulary
    canvas: tuple of int
        `(width, height)` of the image
    rng: np.random.Generator
        The source of all random choices

    Returns
    -------
    WordLayout
        The placement metadata used by the renderer
    """
    if not 1 <= len(text) <= MAX_LABEL_LENGTH:
        raise ValueError(f"Words must have 1 to {MAX_LABEL_LENGTH} characters, got {len(text)}")
    unsupported = sorted({character for character in text if character not in FONT})
    if unsupported:
        raise VocabularyError(f"Unsupported characters {unsupported} in '{text}'")
    width, height = canvas
    text_units = GLYPH_ADVANCE * len(text) - 1
    max_scale = min((width - 4) // text_units, (height - 4) // GLYPH_HEIGHT)
    if max_scale < 1:
        raise ValueError(f"'{text}' does not fit on a {width}x{height} canvas")
    scale = int(rng.integers((max_scale + 1) // 2, max_scale + 1))
    box_width, box_height = text_units * scale, GLYPH_HEIGHT * scale
    origin = (int(rng.integers(0, width - box_width + 1)), int(rng.integers(0, height - box_height + 1)))
    angle = float(rng.uniform(-MAX_ROTATION, MAX_ROTATION))
    background = float(rng.uniform(0, 90))
    foreground = float(rng.uniform(150, 255))
    noise_sigma = float(rng.uniform(2, 8))
    return WordLayout(text, scale, origin, angle, background, foreground, noise_sigma)


def ink_mask(layout: WordLayout, canvas: tuple[int, int]) -> np.ndarray:
    """
    The noise free ink coverage in [0, 1] of a layout, shape `(H, W)`.
    """
    width, height = canvas
    mask = np.zeros((height, width))
    cell = np.ones((layout.scale, layout.scale))
    x, y = layout.origin
    for position, character in enumerate(layout.text):
        bitmap = np.kron(glyph(character), cell)
        left = x + position * GLYPH_ADVANCE * layout.scale
        mask[y : y + bitmap.shape[0], left : left + bitmap.shape[1]] = bitmap
    if layout.angle:
        mask = ndimage.rotate(mask, layout.angle, reshape=False, order=1, mode="constant", cval=0.0)
    return np.clip(mask, 0.0, 1.0)


def render_layout(layout: WordLayout, canvas: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    mask = ink_mask(layout, canvas)
    noise = rng.normal(0.0, layout.noise_sigma, mask.shape)
    image = layout.background + mask * (layout.foreground - layout.background) + noise
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def render_word(text: str, canvas: tuple[int, int] = (200, 64), seed: int | np.random.Generator = 0) -> Sample:
    """
    Render a word with a random scale, placement, rotation of at most 10 degrees and background noise. The same
    text and seed always produce the same image.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layout = layout_word(text, canvas, rng)
    return Sample(render_layout(layout, canvas, rng), text)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _plan_lengths(
    count: int, seed: int, min_len: int, max_len: int, max_per_length: int | None
) -> list[int]:
    lengths = [int(sample_rng(seed, index).integers(min_len, max_len + 1)) for index in range(count)]
    if max_per_length is None:
        return lengths
    options = max_len - min_len + 1
    if count > max_per_length * options:
        raise ValueError(
            f"{count} samples cannot be balanced with at most {max_per_length} per length for {options} lengths"
        )
    used = dict.fromkeys(range(min_len, max_len + 1), 0)
    for index, length in enumerate(lengths):
        # move to the next length with room, in cyclic order
        while used[length] >= max_per_length:
            length = min_len + (length - min_len + 1) % options
        used[length] += 1
        lengths[index] = length
    return lengths


def _render_sample(job: tuple[int, int, tuple[int, int, int], str, tuple[int, int]]) -> Sample:
    seed, index, (min_len, max_len, length), charset, canvas = job
    rng = sample_rng(seed, index)
    rng.integers(min_len, max_len + 1)  # replay the draw of the planning pass
    text = "".join(rng.choice(list(charset), size=length))
    return render_word(text, canvas, rng)


def generate_samples(
    count: int,
    seed: int = 0,
    min_len: int = 1,
    max_len: int = 5,
    charset: str = DESK_CHARSET,
    canvas: tuple[int, int] = (200, 64),
    max_per_length: int | None = None,
    workers: int = 1,
) -> list[Sample]:
    """
    Render `count` random words. Sample `i` only depends on `(seed, i)` and, with `max_per_length`, on the lengths
    drawn for the samples before it.

    Parameters
    ----------
    count: int
        The number of samples
    seed: int
        The global seed
    min_len: int
        The shortest word
    max_len: int
        The longest word
    charset: str
        The characters words are drawn from
    canvas: tuple of int
        `(width, height)` of the images
    max_per_length: int or None
        Caps the number of words of each length
    workers: int
        The number of rendering processes

    Returns
    -------
    list of Sample
        The samples in index order
    """
    logger = logging.getLogger(__name__)
    if count < 0:
        raise ValueError(f"Invalid sample count {count}")
    if not 1 <= min_len <= max_len <= MAX_LABEL_LENGTH:
        raise ValueError(f"Word lengths must satisfy 1 <= {min_len} <= {max_len} <= {MAX_LABEL_LENGTH}")
    if not charset or len(set(charset)) != len(charset):
        raise ValueError("The character set must be non-empty and free of duplicates")
    unsupported = sorted(set(charset) - set(FULL_CHARSET))
    if unsupported:
        raise VocabularyError(f"Unsupported characters {unsupported} in the character set")
    if max_per_length is not None and max_per_length < 1:
        raise ValueError(f"max_per_length must be positive, got {max_per_length}")

    lengths = _plan_lengths(count, seed, min_len, max_len, max_per_length)
    jobs = [(seed, index, (min_len, max_len, length), charset, canvas) for index, length in enumerate(lengths)]
    logger.info("Rendering %i samples with %i worker(s)", count, workers)
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(_render_sample, jobs, chunksize=max(1, count // (4 * workers))))
    return [_render_sample(job) for job in jobs]


def character_histogram(samples: Sequence[Sample]) -> dict[str, int]:
    histogram: dict[str, int] = {}
    for sample in samples:
        for character in sample.label:
            histogram[character] = histogram.get(character, 0) + 1
    return histogram
