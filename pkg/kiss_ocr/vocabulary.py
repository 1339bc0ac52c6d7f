"""
The 95 output classes: digits, upper and lower case letters, the 32 printable ASCII punctuation characters and the
blank, which ends a word and pads it to the fixed sequence length.
"""

from __future__ import annotations

import hashlib
import string
from typing import NamedTuple, Sequence

import numpy as np

BLANK = "<blank>"
DEFAULT_SYMBOLS: tuple[str, ...] = tuple(string.digits + string.ascii_uppercase + string.ascii_lowercase) + tuple(
    string.punctuation
)
NUM_CLASSES = 95
MAX_LABEL_LENGTH = 23


class VocabularyError(ValueError):
    """
    Raised if a character or class id is not part of the vocabulary
    """


class TokenSequence(NamedTuple):
    """
    A label encoded as class ids, blank padded to the sequence length.
    """

    ids: np.ndarray


class Vocabulary:
    def __init__(self, symbols: Sequence[str] = DEFAULT_SYMBOLS) -> None:
        classes = tuple(symbols) + (BLANK,)
        if len(classes) != NUM_CLASSES:
            raise VocabularyError(f"The vocabulary must hold {NUM_CLASSES} classes including the blank, got {len(classes)}")
        if len(set(classes)) != len(classes):
            raise VocabularyError("The vocabulary symbols must be unique")
        if any(len(symbol) != 1 for symbol in symbols):
            raise VocabularyError("Every vocabulary symbol must be a single character")
        self.__classes = classes
        self.__ids = {symbol: index for index, symbol in enumerate(classes)}

    def __len__(self) -> int:
        return len(self.__classes)

    def __contains__(self, character: object) -> bool:
        return character in self.__ids and character != BLANK

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.classes == other.classes

    def __hash__(self) -> int:
        return hash(self.__classes)

    @property
    def classes(self) -> tuple[str, ...]:
        return self.__classes

    @property
    def characters(self) -> tuple[str, ...]:
        return self.__classes[:-1]

    @property
    def blank_id(self) -> int:
        return len(self.__classes) - 1

    @property
    def bos_id(self) -> int:
        """
        The begin-of-sequence token. It only exists as a row of the decoder embedding, never as an output class.
        """
        return len(self.__classes)

    def encode(self, text: str, length: int = MAX_LABEL_LENGTH) -> TokenSequence:
        if len(text) > length:
            raise VocabularyError(f"The label '{text}' is longer than {length} characters")
        ids = np.full(length, self.blank_id, dtype=np.int64)
        for position, character in enumerate(text):
            if character not in self:
                raise VocabularyError(f"Unsupported character {character!r} in label '{text}'")
            ids[position] = self.__ids[character]
        return TokenSequence(ids)

    def encode_batch(self, texts: Sequence[str], length: int = MAX_LABEL_LENGTH) -> np.ndarray:
        return np.stack([self.encode(text, length).ids for text in texts]) if texts else np.zeros((0, length), np.int64)

    def decode(self, ids: Sequence[int] | np.ndarray) -> str:
        """
        Map class ids to text, stopping at the first blank.
        """
        characters = []
        for class_id in np.asarray(ids).reshape(-1):
            class_id = int(class_id)
            if not 0 <= class_id < len(self.__classes):
                raise VocabularyError(f"Class id {class_id} is out of range [0, {len(self.__classes)})")
            if class_id == self.blank_id:
                break
            characters.append(self.__classes[class_id])
        return "".join(characters)

    def serialize(self) -> bytes:
        return "\n".join(self.__classes).encode("utf-8")

    @classmethod
    def deserialize(cls, data: bytes) -> Vocabulary:
        classes = data.decode("utf-8").split("\n")
        if not classes or classes[-1] != BLANK:
            raise VocabularyError("The serialized vocabulary does not end with the blank symbol")
        return cls(classes[:-1])

    def sha256(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()
