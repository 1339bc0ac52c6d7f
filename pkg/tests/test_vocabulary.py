# pylint: disable=missing-module-docstring
import numpy as np
import pytest
from numpy.testing import assert_array_equal

from kiss_ocr.vocabulary import BLANK, NUM_CLASSES, Vocabulary, VocabularyError


def test_class_layout(vocabulary):
    assert len(vocabulary) == NUM_CLASSES == 95
    assert vocabulary.classes[:3] == ("0", "1", "2")
    assert vocabulary.classes[10] == "A" and vocabulary.classes[36] == "a"
    assert vocabulary.classes[-1] == BLANK
    assert vocabulary.blank_id == 94
    assert vocabulary.bos_id == 95


def test_characters_are_printable_ascii(vocabulary):
    assert sorted(vocabulary.characters) == [chr(code) for code in range(0x21, 0x7F)]
    assert " " not in vocabulary
    assert BLANK not in vocabulary


def test_encode_pads_with_blank(vocabulary):
    ids = vocabulary.encode("Ab1", 5).ids
    assert_array_equal(ids, [10, 37, 1, 94, 94])
    assert vocabulary.encode("").ids.shape == (23,)


def test_decode_stops_at_the_first_blank(vocabulary):
    assert vocabulary.decode([12, 13, 94, 14]) == "CD"
    assert vocabulary.decode(np.array([94, 10])) == ""


def test_encode_decode_of_a_label(vocabulary):
    assert vocabulary.decode(vocabulary.encode("K!ss-0cr").ids) == "K!ss-0cr"


def test_encode_batch(vocabulary):
    batch = vocabulary.encode_batch(["A", "BC"], 4)
    assert batch.shape == (2, 4)
    assert batch.dtype == np.int64


@pytest.mark.parametrize("text", ["with space", "ä", "x" * 24])
def test_unsupported_labels(vocabulary, text):
    with pytest.raises(VocabularyError):
        vocabulary.encode(text)


def test_decode_rejects_invalid_ids(vocabulary):
    with pytest.raises(VocabularyError):
        vocabulary.decode([95])


def test_serialization(vocabulary):
    restored = Vocabulary.deserialize(vocabulary.serialize())
    assert restored == vocabulary
    assert restored.sha256() == vocabulary.sha256()


def test_custom_symbols_must_be_complete():
    with pytest.raises(VocabularyError):
        Vocabulary(("a", "b"))
    with pytest.raises(VocabularyError):
        Vocabulary.deserialize(b"a\nb")
