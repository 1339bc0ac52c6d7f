"""
A numpy implementation of a scene text recognizer that localizes every character with a spatial transformer and
reads the crops with a transformer, trained end-to-end from word level labels only.
"""

from ._version import __version__
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .model import KissModel, ModelConfig, recognize_images
from .synth import generate_samples, render_word
from .tensor import ComputationRecord, Tensor, no_grad
from .vocabulary import Vocabulary
