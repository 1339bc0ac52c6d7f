"""
The `kiss-ocr` command line interface with the subcommands `gen-data`, `train`, `eval`, `infer` and `grad-check`.
Results go to stdout or files, diagnostics to stderr.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime errors and 3 if a verification failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._version import __version__
from .checkpoint import load_checkpoint, restore_model
from .checkpoint_helper import CheckpointError
from .config import (
    ConfigError,
    RunConfig,
    add_config_arguments,
    build_run_config,
    cli_values,
    dump_config,
    load_config_file,
    parse_config_text,
)
from .dataset import DatasetError, read_dataset, read_pgm, write_dataset
from .gradcheck import format_report, gradcheck_registry
from .localizer import dump_rois
from .model import KissModel, images_to_tensor, recognize_images
from .synth import DESK_CHARSET, FULL_CHARSET, generate_samples
from .tensor import no_grad
from .training import Trainer, TrainingDivergedError, evaluate
from .vocabulary import Vocabulary, VocabularyError

EXIT_SUCCESS = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3

CHARSETS = {"desk": DESK_CHARSET, "full": FULL_CHARSET}

# seed offsets of the independent random streams of a run
_MODEL_STREAM = 1


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    layers = [load_config_file(args.config)] if args.config is not None else []
    layers.append(cli_values(args))
    return build_run_config(*layers, base=base)


def load_model(path: str | Path, args: argparse.Namespace | None = None) -> tuple[KissModel, RunConfig]:
    """
    Rebuild the model stored in a checkpoint. The configuration saved with the checkpoint is the base, settings
    from `args` are applied on top.
    """
    checkpoint = load_checkpoint(path)
    stored = build_run_config(parse_config_text(checkpoint.config_text, f"{path}:meta/config"))
    config = stored if args is None else _run_config(args, base=stored)
    rng = np.random.default_rng(np.random.SeedSequence([config.train.seed, _MODEL_STREAM]))
    model = KissModel(config.model, checkpoint.vocabulary, rng)
    restore_model(checkpoint, model)
    return model.eval(), config


def _charset(value: str) -> str:
    return CHARSETS.get(value, value)


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _run_config(args)
    charset = _charset(args.charset)
    seed = config.train.seed
    samples = generate_samples(
        args.count,
        seed=seed,
        min_len=args.min_len,
        max_len=args.max_len,
        charset=charset,
        canvas=config.model.image_size,
        max_per_length=args.max_per_length,
        workers=args.workers,
    )
    width, height = config.model.image_size
    meta = {
        "seed": seed,
        "charset": charset,
        "min_len": args.min_len,
        "max_len": args.max_len,
        "max_per_length": args.max_per_length if args.max_per_length is not None else "none",
        "image_width": width,
        "image_height": height,
        "vocabulary_sha256": Vocabulary().sha256(),
    }
    directory = write_dataset(args.out, samples, meta)
    print(directory)
    return EXIT_SUCCESS


def cmd_train(args: argparse.Namespace) -> int:
    config = _run_config(args)
    if args.no_augment:
        config = replace(config, augment=replace(config.augment, train_fraction=0.0))
    vocabulary = Vocabulary()
    train_samples = read_dataset(args.train_data, vocabulary)
    val_samples = read_dataset(args.val_data, vocabulary) if args.val_data is not None else []
    rng = np.random.default_rng(np.random.SeedSequence([config.train.seed, _MODEL_STREAM]))
    model = KissModel(config.model, vocabulary, rng)
    trainer = Trainer(model, config.train, config.augment, args.out, dump_config(config))
    results = trainer.fit(train_samples, val_samples)
    print(f"steps\t{len(results)}\nloss\t{results[-1].loss:.6f}\ncheckpoints\t{args.out}")
    return EXIT_SUCCESS


def cmd_eval(args: argparse.Namespace) -> int:
    model, config = load_model(args.checkpoint, args)
    samples = read_dataset(args.data, model.vocabulary)
    report = evaluate(
        model, samples, use_tta=config.tta, case_insensitive=config.case_insensitive, batch_size=config.train.batch_size
    )
    text = report.to_tsv()
    if args.out is not None:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_SUCCESS


def cmd_infer(args: argparse.Namespace) -> int:
    model, config = load_model(args.checkpoint, args)
    image = read_pgm(args.image)
    (result,) = recognize_images(model, [image], use_tta=config.tta)
    if args.dump_rois is not None:
        images = images_to_tensor([image], config.model.image_size)
        with no_grad():
            rois = model.localizer(images)
        resized = np.clip(np.rint(images.data[0, 0] * 255), 0, 255).astype(np.uint8)
        dump_rois(resized, rois, args.dump_rois, prefix=Path(args.image).stem)
    print(result.text)
    return EXIT_SUCCESS


def cmd_grad_check(args: argparse.Namespace) -> int:
    config = _run_config(args)
    try:
        results = gradcheck_registry.run(config.train.seed, args.op)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sys.stdout.write(format_report(results))
    failed = [result.name for result in results if not result.passed]
    if failed:
        logging.getLogger(__name__).error("Gradient check failed for: %s", ", ".join(failed))
        return EXIT_VERIFICATION
    return EXIT_SUCCESS


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="configuration file with 'key = value' lines")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")

    parser = _ArgumentParser(prog="kiss-ocr", description="Scene text recognition with a localizer and a transformer")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    gen_data = subparsers.add_parser("gen-data", parents=[common], help="render a synthetic word dataset")
    gen_data.add_argument("--out", type=Path, required=True, help="output dataset directory")
    gen_data.add_argument("--count", type=int, default=2000, help="number of samples (default: %(default)s)")
    gen_data.add_argument("--min-len", type=int, default=1, help="shortest word (default: %(default)s)")
    gen_data.add_argument("--max-len", type=int, default=5, help="longest word (default: %(default)s)")
    gen_data.add_argument(
        "--charset", default="desk", help="'desk' (0-9A-F), 'full' (94 printable characters) or a literal set"
    )
    gen_data.add_argument("--max-per-length", type=int, default=None, help="cap the samples per word length")
    gen_data.add_argument("--workers", type=int, default=1, help="rendering processes (default: %(default)s)")
    add_config_arguments(gen_data, ("seed", "image_width", "image_height"))
    gen_data.set_defaults(handler=cmd_gen_data)

    train = subparsers.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--train-data", type=Path, required=True, help="training dataset directory")
    train.add_argument("--val-data", type=Path, default=None, help="validation dataset directory")
    train.add_argument("--out", type=Path, required=True, help="directory for checkpoints and train.log")
    train.add_argument("--no-augment", action="store_true", help="disable training augmentation")
    add_config_arguments(train)
    train.set_defaults(handler=cmd_train)

    evaluate_parser = subparsers.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    evaluate_parser.add_argument("--checkpoint", type=Path, required=True)
    evaluate_parser.add_argument("--data", type=Path, required=True, help="dataset directory")
    evaluate_parser.add_argument("--out", type=Path, default=None, help="also write the report to this file")
    add_config_arguments(evaluate_parser, ("seed", "batch_size", "tta", "case_insensitive"))
    evaluate_parser.set_defaults(handler=cmd_eval)

    infer = subparsers.add_parser("infer", parents=[common], help="read the text of a single PGM image")
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("image", type=Path)
    infer.add_argument("--dump-rois", type=Path, default=None, metavar="DIR", help="write the region crops to DIR")
    add_config_arguments(infer, ("seed", "tta"))
    infer.set_defaults(handler=cmd_infer)

    grad_check = subparsers.add_parser("grad-check", parents=[common], help="verify all gradients numerically")
    grad_check.add_argument(
        "--op", action="append", default=None, choices=gradcheck_registry.names, help="check only this operation"
    )
    add_config_arguments(grad_check, ("seed",))
    grad_check.set_defaults(handler=cmd_grad_check)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logger = logging.getLogger(__name__)

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (
        CheckpointError,
        DatasetError,
        VocabularyError,
        TrainingDivergedError,
        NotImplementedError,
        ValueError,
        OSError,
    ) as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except Exception:  # pylint: disable=broad-except
        logger.exception("Unexpected error")
        return EXIT_RUNTIME
