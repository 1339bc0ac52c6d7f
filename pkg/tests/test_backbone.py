# pylint: disable=missing-module-docstring
import numpy as np
import pytest
from numpy.testing import assert_allclose

from kiss_ocr.backbone import Backbone, BackboneConfig, extract_features, global_pool
from kiss_ocr.tensor import ComputationRecord, ShapeMismatchError, Tensor


@pytest.mark.parametrize(
    "input_size,expected",
    [((200, 64), (25, 8)), ((50, 64), (7, 8)), ((7, 5), (1, 1))],
)
def test_output_size(input_size, expected):
    assert BackboneConfig(input_size=input_size).output_size() == expected


def test_feature_map_shape(rng):
    config = BackboneConfig((4, 8), (1, 2), (20, 12), norm_groups=2)
    backbone = Backbone(config, rng)
    features = backbone(Tensor(rng.uniform(0, 1, (3, 1, 12, 20))))
    width, height = config.output_size()
    assert features.tensor.shape == (3, 8, height, width)
    assert features.source_size == (20, 12)
    assert global_pool(features).shape == (3, 8)


def test_stage_layout(rng):
    backbone = Backbone(BackboneConfig((4, 8), (2, 2), (16, 16), norm_groups=2), rng)
    assert len(backbone.blocks) == 4
    # only the first block of every stage projects the shortcut
    assert [block.projection is not None for block in backbone.blocks] == [True, False, True, False]
    assert backbone.blocks[2].conv1.stride == 2


def test_resnet18_layout():
    config = BackboneConfig.resnet18()
    assert config.stage_channels == (64, 128, 256, 512)
    assert config.out_channels == 512


def test_rgb_input(rng):
    backbone = Backbone(BackboneConfig((4,), (1,), (8, 8), norm_groups=2, in_channels=3), rng)
    assert backbone(Tensor(np.ones((1, 3, 8, 8)))).tensor.shape == (1, 4, 4, 4)


def test_wrong_input_size(rng):
    backbone = Backbone(BackboneConfig((4,), (1,), (8, 8), norm_groups=2), rng)
    with pytest.raises(ShapeMismatchError, match="extract_features"):
        extract_features(Tensor(np.ones((1, 1, 8, 9))), backbone)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"stage_channels": (4, 8), "blocks_per_stage": (1,)},
        {"stage_channels": (6,), "blocks_per_stage": (1,), "norm_groups": 4},
        {"blocks_per_stage": (2, 0, 2)},
        {"in_channels": 2},
    ],
)
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        BackboneConfig(**kwargs)


def test_all_parameters_receive_gradients(rng, float64):
    backbone = Backbone(BackboneConfig((4, 8), (1, 1), (8, 8), norm_groups=2), rng)
    with ComputationRecord() as record:
        record.backward((backbone(Tensor(rng.uniform(0, 1, (2, 1, 8, 8)))).tensor ** 2).mean())
    for name, parameter in backbone.named_parameters():
        assert parameter.grad is not None, name
        assert np.all(np.isfinite(parameter.grad)), name


def test_samples_are_independent(rng, float64):
    backbone = Backbone(BackboneConfig((4,), (1,), (8, 8), norm_groups=2), rng)
    images = rng.uniform(0, 1, (2, 1, 8, 8))
    together = backbone(Tensor(images)).tensor.data
    alone = backbone(Tensor(images[:1])).tensor.data
    assert_allclose(together[:1], alone)
