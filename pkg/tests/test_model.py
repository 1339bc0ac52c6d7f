# pylint: disable=missing-module-docstring
from dataclasses import replace

import numpy as np
import pytest

from kiss_ocr.localizer import RegularCropper
from kiss_ocr.model import KissModel, ModelFactory, images_to_tensor, recognize_images
from kiss_ocr.recognizer import RecognizerKind
from kiss_ocr.synth import generate_samples
from kiss_ocr.tensor import ComputationRecord, Tensor


def _images(rng, count, size=(24, 16)):
    width, height = size
    return [rng.integers(0, 256, (height, width), dtype=np.uint8) for _ in range(count)]


def test_forward_shapes(rng, vocabulary, tiny_config):
    model = KissModel(tiny_config, vocabulary, rng)
    targets = vocabulary.encode_batch(["AB", "7"], 4)
    logits, rois = model(images_to_tensor(_images(rng, 2), (24, 16)), targets, rng)
    assert logits.shape == (2, 4, len(vocabulary))
    assert rois.crops.shape == (8, 1, 8, 6)


def test_loss_is_the_sum_of_its_terms(rng, vocabulary, tiny_config, float64):
    model = KissModel(tiny_config, vocabulary, rng)
    terms = model.loss(images_to_tensor(_images(rng, 2), (24, 16)), vocabulary.encode_batch(["A", "BC"], 4), rng)
    assert terms.total.item() == pytest.approx(terms.cross_entropy.item() + terms.penalty.item())
    # an untrained model is close to a uniform guess
    assert terms.cross_entropy.item() == pytest.approx(np.log(len(vocabulary)), rel=0.5)


def test_all_parameters_are_trained(rng, vocabulary, tiny_config, float64):
    model = KissModel(tiny_config, vocabulary, rng)
    with ComputationRecord() as record:
        terms = model.loss(images_to_tensor(_images(rng, 2), (24, 16)), vocabulary.encode_batch(["A", "BC"], 4), rng)
        record.backward(terms.total)
    missing = [name for name, parameter in model.named_parameters() if parameter.grad is None]
    assert not missing


def test_predict(rng, vocabulary, tiny_config):
    model = KissModel(tiny_config, vocabulary, rng).eval()
    results = model.predict(images_to_tensor(_images(rng, 3), (24, 16)))
    assert len(results) == 3
    for result in results:
        assert len(result.text) <= 4
        assert len(result.char_probs) == len(result.text)
        assert result.tokens.ids.shape == (4,)


@pytest.mark.parametrize("tta", [False, True])
def test_recognize_images_of_any_size(rng, vocabulary, tiny_config, tta):
    model = KissModel(tiny_config, vocabulary, rng)
    images = _images(rng, 1) + _images(rng, 1, (50, 50))
    assert len(recognize_images(model, images, use_tta=tta)) == 2
    assert not recognize_images(model, [])


def test_images_to_tensor_scales_to_unit_range():
    batch = images_to_tensor([np.full((16, 24), 255, dtype=np.uint8), np.zeros((8, 8), dtype=np.uint8)], (24, 16))
    assert batch.shape == (2, 1, 16, 24)
    assert batch.data[0].min() == 1.0 and batch.data[1].max() == 0.0


def test_recognition_only_uses_regular_crops(rng, vocabulary, tiny_config):
    config = replace(tiny_config, recognition_only=True)
    model = KissModel(config, vocabulary, rng)
    assert isinstance(model.localizer, RegularCropper)
    assert not model.localizer_parameters()


def test_softmax_recognizer(rng, vocabulary, tiny_config):
    config = replace(tiny_config, recognizer=RecognizerKind.SOFTMAX)
    model = KissModel(config, vocabulary, rng)
    logits, _ = model(images_to_tensor(_images(rng, 2), (24, 16)), vocabulary.encode_batch(["A", "B"], 4))
    assert logits.shape == (2, 4, len(vocabulary))
    assert len(model.eval().predict(images_to_tensor(_images(rng, 2), (24, 16)))) == 2


def test_factory_rejects_unknown_kinds():
    with pytest.raises(ValueError, match="No implementation"):
        ModelFactory().get("unknown")


def test_models_are_reproducible(vocabulary, tiny_config):
    first = KissModel(tiny_config, vocabulary, np.random.default_rng(5))
    second = KissModel(tiny_config, vocabulary, np.random.default_rng(5))
    for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
        assert np.array_equal(a.data, b.data), name


def test_rendered_words_fit_the_tiny_model(rng, vocabulary, tiny_config):
    samples = generate_samples(2, seed=0, max_len=2, canvas=(24, 16))
    model = KissModel(tiny_config, vocabulary, rng)
    assert len(model.eval().predict(images_to_tensor([sample.image for sample in samples], (24, 16)))) == 2
    assert images_to_tensor([samples[0].image], (24, 16)).shape == (1, 1, 16, 24)
    assert isinstance(images_to_tensor([samples[0].image], (24, 16)), Tensor)
