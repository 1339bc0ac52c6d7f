# pylint: disable=missing-module-docstring
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from kiss_ocr.glyphs import FONT, GLYPH_HEIGHT, GLYPH_WIDTH, glyph
from kiss_ocr.synth import (
    DESK_CHARSET,
    FULL_CHARSET,
    character_histogram,
    generate_samples,
    ink_mask,
    layout_word,
    render_layout,
    render_word,
)
from kiss_ocr.vocabulary import Vocabulary, VocabularyError


def test_font_covers_the_vocabulary():
    assert set(FONT) == set(Vocabulary().characters)
    assert len(FULL_CHARSET) == 94


def test_glyphs_are_distinct():
    bitmaps = {glyph(character).tobytes() for character in FONT}
    assert len(bitmaps) == len(FONT)


def test_glyph_bitmaps():
    assert glyph("A").shape == (GLYPH_HEIGHT, GLYPH_WIDTH)
    dash = np.zeros((7, 5), dtype=bool)
    dash[3] = True
    assert_array_equal(glyph("-"), dash)
    assert_array_equal(glyph("!")[:, 2], [True, True, True, True, True, False, True])
    with pytest.raises(KeyError):
        glyph(" ")


def test_layout_stays_on_the_canvas(rng):
    for text in ("A", "0123456789ABCDEF0123456"):
        layout = layout_word(text, (200, 64), rng)
        x, y, width, height = layout.box
        assert 0 <= x and x + width <= 200
        assert 0 <= y and y + height <= 64
        assert -10.0 <= layout.angle <= 10.0
        assert layout.background < layout.foreground


def test_layout_rejects_unsupported_words(rng):
    with pytest.raises(VocabularyError):
        layout_word("a b", (200, 64), rng)
    with pytest.raises(ValueError):
        layout_word("", (200, 64), rng)
    with pytest.raises(ValueError):
        layout_word("ABCDEFGH", (20, 64), rng)


def test_ink_mask_without_rotation(rng):
    layout = layout_word("E", (40, 20), rng)._replace(angle=0.0, scale=1, origin=(2, 3))
    mask = ink_mask(layout, (40, 20))
    assert mask.sum() == glyph("E").sum()
    assert_array_equal(mask[3:10, 2:7], glyph("E"))


def test_render_word_is_deterministic():
    first = render_word("C0FFEE", seed=3)
    second = render_word("C0FFEE", seed=3)
    assert first.label == "C0FFEE"
    assert first.image.shape == (64, 200)
    assert first.image.dtype == np.uint8
    assert_array_equal(first.image, second.image)
    assert not np.array_equal(first.image, render_word("C0FFEE", seed=4).image)


def test_text_is_brighter_than_the_background():
    image = render_word("8888", seed=0).image.astype(float)
    assert image.max() > 150
    assert np.median(image) < 100


def test_generate_samples_is_deterministic():
    first = generate_samples(12, seed=7, max_len=5)
    second = generate_samples(12, seed=7, max_len=5)
    assert [sample.label for sample in first] == [sample.label for sample in second]
    for a, b in zip(first, second):
        assert_array_equal(a.image, b.image)


def test_samples_only_depend_on_their_index():
    few = generate_samples(3, seed=5)
    many = generate_samples(6, seed=5)
    assert [sample.label for sample in few] == [sample.label for sample in many[:3]]


def test_parallel_rendering_matches_serial():
    serial = generate_samples(6, seed=2, workers=1)
    parallel = generate_samples(6, seed=2, workers=2)
    for a, b in zip(serial, parallel):
        assert a.label == b.label
        assert_array_equal(a.image, b.image)


def test_label_lengths_and_charset():
    samples = generate_samples(40, seed=1, min_len=2, max_len=5, charset="XYZ")
    assert all(2 <= len(sample.label) <= 5 for sample in samples)
    assert set("".join(sample.label for sample in samples)) <= set("XYZ")


def test_balanced_lengths():
    samples = generate_samples(20, seed=9, min_len=1, max_len=4, max_per_length=5)
    lengths = [len(sample.label) for sample in samples]
    assert sorted(lengths.count(length) for length in range(1, 5)) == [5, 5, 5, 5]
    with pytest.raises(ValueError):
        generate_samples(21, seed=9, min_len=1, max_len=4, max_per_length=5)


def test_histogram_covers_the_desk_charset():
    samples = generate_samples(1000, seed=7, max_len=5, canvas=(60, 16))
    histogram = character_histogram(samples)
    assert set(histogram) == set(DESK_CHARSET)
    assert sum(histogram.values()) == sum(len(sample.label) for sample in samples)


@pytest.mark.parametrize(
    "kwargs",
    [{"count": -1}, {"count": 1, "min_len": 0}, {"count": 1, "max_len": 24}, {"count": 1, "charset": "AA"}],
)
def test_invalid_generation_parameters(kwargs):
    with pytest.raises(ValueError):
        generate_samples(**kwargs)


def test_unsupported_charset():
    with pytest.raises(VocabularyError):
        generate_samples(1, charset="ä")


def test_rendered_glyph_matches_its_template():
    rng = np.random.default_rng(21)
    layout = layout_word("A", (200, 64), rng)._replace(angle=0.0)
    image = render_layout(layout, (200, 64), rng).astype(float)
    template = np.kron(glyph("A"), np.ones((layout.scale, layout.scale))).astype(float)
    x, y = layout.origin
    crop = image[y : y + template.shape[0], x : x + template.shape[1]]
    correlation = np.corrcoef(crop.ravel(), template.ravel())[0, 1]
    assert correlation > 0.8
    # outside the glyph there is only background noise
    outside = np.delete(image, np.s_[y : y + template.shape[0]], axis=0)
    assert outside.max() < layout.foreground
