# pylint: disable=missing-module-docstring,redefined-outer-name
import numpy as np
import pytest

from kiss_ocr.localizer import LocalizerConfig
from kiss_ocr.model import ModelConfig
from kiss_ocr.recognizer import TransformerConfig
from kiss_ocr.tensor import precision
from kiss_ocr.vocabulary import Vocabulary


def pytest_collection_modifyitems(items):
    # Run the slow training experiments last
    items.sort(key=lambda item: item.get_closest_marker("slow") is not None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def vocabulary():
    return Vocabulary()


@pytest.fixture
def tiny_config():
    """
    A model small enough to run a forward and backward pass in a few milliseconds.
    """
    return ModelConfig(
        image_size=(24, 16),
        stage_channels=(4, 8),
        blocks_per_stage=(1, 1),
        norm_groups=2,
        localizer=LocalizerConfig(n_rois=4, roi_size=(6, 8), lstm_hidden=8, rotation_dropout=0.0),
        transformer=TransformerConfig(d_model=16, n_heads=2, d_ff=32, dropout=0.0),
    )
