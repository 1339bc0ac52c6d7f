"""
The run configuration. Every setting has a `key` usable in `key = value` configuration files and a matching
`--kebab-case` command line flag. Command line flags override the file, the file overrides the defaults.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, NamedTuple

from .augment import AugmentPolicy
from .localizer import LocalizerKind
from .model import ModelConfig
from .recognizer import RecognizerKind
from .training import TrainConfig


class ConfigError(ValueError):
    """
    Raised for unknown keys, values that cannot be parsed and invalid combinations of settings
    """


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    tta: bool = False
    case_insensitive: bool = False


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {value!r}")


def _parse_ints(value: str) -> tuple[int, ...]:
    return tuple(int(item) for item in value.split(",") if item.strip())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(item) for item in value)
    return str(value)


class ConfigKey(NamedTuple):
    name: str
    parse: Callable[[str], Any]
    get: Callable[[RunConfig], Any]
    apply: Callable[[dict[str, dict[str, Any]], Any], None]
    help: str


def _setter(section: str, attribute: str) -> Callable[[dict[str, dict[str, Any]], Any], None]:
    def apply(sections: dict[str, dict[str, Any]], value: Any) -> None:
        sections[section][attribute] = value

    return apply


def _size_setter(section: str, attribute: str, index: int) -> Callable[[dict[str, dict[str, Any]], Any], None]:
    def apply(sections: dict[str, dict[str, Any]], value: Any) -> None:
        size = list(sections[section][attribute])
        size[index] = value
        sections[section][attribute] = tuple(size)

    return apply


def _range_setter(attribute: str, index: int) -> Callable[[dict[str, dict[str, Any]], Any], None]:
    return _size_setter("augment", attribute, index)


def _recognizer_setter(sections: dict[str, dict[str, Any]], value: bool) -> None:
    sections["model"]["recognizer"] = RecognizerKind.SOFTMAX if value else RecognizerKind.TRANSFORMER


# fmt: off
KEYS: tuple[ConfigKey, ...] = (
    ConfigKey("image_width", int, lambda c: c.model.image_size[0], _size_setter("model", "image_size", 0),
              "width of the network input in pixels"),
    ConfigKey("image_height", int, lambda c: c.model.image_size[1], _size_setter("model", "image_size", 1),
              "height of the network input in pixels"),
    ConfigKey("in_channels", int, lambda c: c.model.in_channels, _setter("model", "in_channels"),
              "1 for grayscale, 3 for RGB"),
    ConfigKey("stage_channels", _parse_ints, lambda c: c.model.stage_channels, _setter("model", "stage_channels"),
              "comma separated channels of the backbone stages"),
    ConfigKey("blocks_per_stage", _parse_ints, lambda c: c.model.blocks_per_stage,
              _setter("model", "blocks_per_stage"), "comma separated residual blocks per stage"),
    ConfigKey("norm_groups", int, lambda c: c.model.norm_groups, _setter("model", "norm_groups"),
              "group normalization groups"),
    ConfigKey("n_rois", int, lambda c: c.model.localizer.n_rois, _setter("localizer", "n_rois"),
              "number of regions of interest, also the maximum word length"),
    ConfigKey("roi_width", int, lambda c: c.model.localizer.roi_size[0], _size_setter("localizer", "roi_size", 0),
              "width of a region crop"),
    ConfigKey("roi_height", int, lambda c: c.model.localizer.roi_size[1], _size_setter("localizer", "roi_size", 1),
              "height of a region crop"),
    ConfigKey("lstm_hidden", int, lambda c: c.model.localizer.lstm_hidden, _setter("localizer", "lstm_hidden"),
              "hidden size of the localizer LSTM"),
    ConfigKey("rotation_dropout", float, lambda c: c.model.localizer.rotation_dropout,
              _setter("localizer", "rotation_dropout"), "probability of dropping the rotation of a region"),
    ConfigKey("localizer", LocalizerKind, lambda c: c.model.localizer.kind.value, _setter("localizer", "kind"),
              "localizer implementation: lstm or transformer"),
    ConfigKey("d_model", int, lambda c: c.model.transformer.d_model, _setter("transformer", "d_model"),
              "transformer width"),
    ConfigKey("n_heads", int, lambda c: c.model.transformer.n_heads, _setter("transformer", "n_heads"),
              "attention heads"),
    ConfigKey("d_ff", int, lambda c: c.model.transformer.d_ff, _setter("transformer", "d_ff"),
              "feed-forward width"),
    ConfigKey("n_layers", int, lambda c: c.model.transformer.n_layers, _setter("transformer", "n_layers"),
              "encoder and decoder layers"),
    ConfigKey("dropout", float, lambda c: c.model.transformer.dropout, _setter("transformer", "dropout"),
              "transformer dropout rate"),
    ConfigKey("recognition_only", _parse_bool, lambda c: c.model.recognition_only,
              _setter("model", "recognition_only"), "use regular vertical slices instead of the localizer"),
    ConfigKey("softmax_recognizer", _parse_bool, lambda c: c.model.recognizer is RecognizerKind.SOFTMAX,
              _recognizer_setter, "classify every position independently with its own softmax head"),
    ConfigKey("batch_size", int, lambda c: c.train.batch_size, _setter("train", "batch_size"), "samples per step"),
    ConfigKey("epochs", int, lambda c: c.train.epochs, _setter("train", "epochs"), "passes over the training set"),
    ConfigKey("lr", float, lambda c: c.train.lr, _setter("train", "lr"), "initial learning rate"),
    ConfigKey("lr_decay_per_epoch", float, lambda c: c.train.lr_decay_per_epoch,
              _setter("train", "lr_decay_per_epoch"), "learning rate factor applied at every epoch"),
    ConfigKey("localizer_clip_norm", float, lambda c: c.train.localizer_clip_norm,
              _setter("train", "localizer_clip_norm"), "gradient norm limit of the localizer"),
    ConfigKey("seed", int, lambda c: c.train.seed, _setter("train", "seed"), "seed of all random choices"),
    ConfigKey("augment_fraction", float, lambda c: c.augment.train_fraction, _setter("augment", "train_fraction"),
              "fraction of augmented training images"),
    ConfigKey("resize_min", float, lambda c: c.augment.resize_range[0], _range_setter("resize_range", 0),
              "smallest downscale factor"),
    ConfigKey("resize_max", float, lambda c: c.augment.resize_range[1], _range_setter("resize_range", 1),
              "largest downscale factor"),
    ConfigKey("blur_sigma_max", float, lambda c: c.augment.blur_sigma_range[1], _range_setter("blur_sigma_range", 1),
              "largest Gaussian blur sigma"),
    ConfigKey("distortion_magnitude", float, lambda c: c.augment.distortion_magnitude,
              _setter("augment", "distortion_magnitude"), "corner jitter as a fraction of the image size"),
    ConfigKey("tta", _parse_bool, lambda c: c.tta, _setter("run", "tta"), "rotate test images and keep the best"),
    ConfigKey("case_insensitive", _parse_bool, lambda c: c.case_insensitive, _setter("run", "case_insensitive"),
              "ignore the case when comparing words"),
)
# fmt: on
KEYS_BY_NAME = {key.name: key for key in KEYS}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """
    Parse `key = value` lines. `#` starts a comment, unknown keys are errors.
    """
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, separator, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not separator:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {line!r}")
        if key not in KEYS_BY_NAME:
            raise ConfigError(f"{source}:{number}: unknown configuration key '{key}'")
        values[key] = value.strip()
    return values


def load_config_file(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read configuration file '{path}': {exc}") from exc
    return parse_config_text(text, str(path))


def build_run_config(*layers: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """
    Apply the layers of raw values in order, later layers win.

    Raises
    ------
    ConfigError
        If a key is unknown, a value cannot be parsed or the resulting settings are invalid
    """
    base = RunConfig() if base is None else base
    sections: dict[str, dict[str, Any]] = {
        "model": {},
        "localizer": {"roi_size": base.model.localizer.roi_size},
        "transformer": {},
        "train": {},
        "augment": {
            "resize_range": base.augment.resize_range,
            "blur_sigma_range": base.augment.blur_sigma_range,
        },
        "run": {},
    }
    sections["model"]["image_size"] = base.model.image_size
    for layer in layers:
        for name, raw in layer.items():
            key = KEYS_BY_NAME.get(name.replace("-", "_"))
            if key is None:
                raise ConfigError(f"Unknown configuration key '{name}'")
            try:
                value = key.parse(raw)
            except ValueError as exc:
                raise ConfigError(f"Invalid value {raw!r} for '{key.name}': {exc}") from None
            key.apply(sections, value)
    try:
        model = base.model
        model = replace(
            model,
            localizer=replace(model.localizer, **sections["localizer"]),
            transformer=replace(model.transformer, **sections["transformer"]),
            **sections["model"],
        )
        # build the backbone configurations once to validate them
        _ = model.localizer_backbone, model.recognizer_backbone
        return replace(
            base,
            model=model,
            train=replace(base.train, **sections["train"]),
            augment=replace(base.augment, **sections["augment"]),
            **sections["run"],
        )
    except ValueError as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc


def dump_config(config: RunConfig) -> str:
    """
    All keys as `key = value` lines that `parse_config_text` reads back into the same configuration.
    """
    return "".join(f"{key.name} = {_format(key.get(config))}\n" for key in KEYS)


def add_config_arguments(parser: argparse.ArgumentParser, names: tuple[str, ...] | None = None) -> None:
    """
    Add a `--kebab-case` flag for every key. Booleans become switches. Values stay strings and are parsed together
    with the configuration file.
    """
    defaults = RunConfig()
    group = parser.add_argument_group("configuration keys")
    for key in KEYS:
        if names is not None and key.name not in names:
            continue
        flag = "--" + key.name.replace("_", "-")
        default = _format(key.get(defaults))
        if key.parse is _parse_bool:
            group.add_argument(
                flag,
                dest=f"key_{key.name}",
                action="store_const",
                const="true",
                default=None,
                help=f"{key.help} (default: {default})",
            )
        else:
            group.add_argument(
                flag, dest=f"key_{key.name}", default=None, metavar="VALUE", help=f"{key.help} (default: {default})"
            )


def cli_values(namespace: argparse.Namespace) -> dict[str, str]:
    """
    The configuration keys given on the command line.
    """
    return {
        name[len("key_") :]: value
        for name, value in vars(namespace).items()
        if name.startswith("key_") and value is not None
    }
