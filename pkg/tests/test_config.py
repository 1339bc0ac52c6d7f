# pylint: disable=missing-module-docstring
import argparse

import pytest

from kiss_ocr.config import (
    KEYS,
    ConfigError,
    RunConfig,
    add_config_arguments,
    build_run_config,
    cli_values,
    dump_config,
    load_config_file,
    parse_config_text,
)
from kiss_ocr.recognizer import RecognizerKind


def test_defaults():
    config = build_run_config()
    assert config == RunConfig()
    assert config.model.image_size == (200, 64)
    assert config.model.localizer.n_rois == 23


def test_later_layers_win():
    config = build_run_config({"epochs": "5", "lr": "0.01"}, {"epochs": "7"})
    assert config.train.epochs == 7
    assert config.train.lr == 0.01


def test_partial_sizes():
    config = build_run_config({"image_width": "100"}, {"roi_height": "16"}, {"resize_min": "0.5"})
    assert config.model.image_size == (100, 64)
    assert config.model.localizer.roi_size[1] == 16
    assert config.augment.resize_range == (0.5, 1.0)


def test_boolean_keys():
    config = build_run_config({"tta": "yes", "softmax_recognizer": "true", "recognition_only": "1"})
    assert config.tta
    assert config.model.recognizer is RecognizerKind.SOFTMAX
    assert config.model.recognition_only
    with pytest.raises(ConfigError, match="tta"):
        build_run_config({"tta": "maybe"})


def test_parse_config_text():
    text = "# run settings\nepochs = 4  # short\n\nbatch-size=8\n"
    assert parse_config_text(text) == {"epochs": "4", "batch_size": "8"}
    with pytest.raises(ConfigError, match="<config>:1: unknown"):
        parse_config_text("learning_rate = 1")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_config_text("epochs 4")


@pytest.mark.parametrize(
    "values",
    [
        {"epochs": "many"},
        {"unknown": "1"},
        {"norm_groups": "3"},
        {"stage_channels": "8,16", "blocks_per_stage": "1"},
        {"augment_fraction": "2"},
        {"lr": "-1"},
    ],
)
def test_invalid_values(values):
    with pytest.raises(ConfigError):
        build_run_config(values)


def test_dump_round_trip():
    config = build_run_config({"epochs": "9", "stage_channels": "8,16", "blocks_per_stage": "1,1", "tta": "true"})
    text = dump_config(config)
    assert len(text.splitlines()) == len(KEYS)
    assert "stage_channels = 8,16\n" in text
    assert build_run_config(parse_config_text(text)) == config


def test_base_configuration():
    base = build_run_config({"epochs": "9"})
    assert build_run_config({"lr": "0.5"}, base=base).train.epochs == 9


def test_config_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("seed = 3\n", encoding="utf-8")
    assert load_config_file(path) == {"seed": "3"}
    with pytest.raises(ConfigError, match="missing.conf"):
        load_config_file(tmp_path / "missing.conf")


def test_command_line_flags():
    parser = argparse.ArgumentParser()
    add_config_arguments(parser, ("epochs", "tta", "image_width"))
    values = cli_values(parser.parse_args(["--epochs", "2", "--tta"]))
    assert values == {"epochs": "2", "tta": "true"}
    assert cli_values(parser.parse_args([])) == {}
    with pytest.raises(SystemExit):
        parser.parse_args(["--lr", "1"])
