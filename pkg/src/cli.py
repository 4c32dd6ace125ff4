"""
Command-line interface: gen, train, eval and export-transition.

Exit codes: 0 ok, 1 I/O or incompatible artifacts, 2 invalid arguments or
config, 3 numeric failure during training.
"""

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .config_loader import ConfigLoader, configure_logging, get_output_dir, load_training_overrides
from .datagen import (METADATA_FILE, TEST_FILE, TRAIN_FILE, TRANSITION_FILE, NoiseSpec, SyntheticConfig,
                      corrupt_labels, generate_clean, random_transition, read_dataset, read_metadata,
                      write_dataset, write_noise_spec)
from .encoder import MarkedCorpus
from .errors import ConfigError, NumericError, ShapeError, TransitionLossError
from .evalkit import bag_truths, build_report, write_pr_table, write_report
from .model import forward_probs
from .noisemodel import read_transition_csv, write_transition_csv
from .trainer import (BaselineMode, TrainConfig, Trainer, load_checkpoint, predict_bags)

logger = logging.getLogger(__name__)

CHECKPOINT_FILE = "model.ckpt"
TRAIN_LOG_FILE = "train_log.jsonl"
MANIFEST_FILE = "manifest.json"


class RunManifest(BaseModel):
    """What a run read, what it wrote and the settings it used."""
    subcommand: str
    version: str = __version__
    seed: Optional[int] = None
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict, description="file name -> sha256")

    def write(self, path: Path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.model_dump(mode="json"), f, indent=2, sort_keys=True)
            f.write("\n")


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, (NumericError, ArithmeticError)):
        return 3
    if isinstance(error, (ShapeError, OSError)):
        return 1
    if isinstance(error, (ValueError, IndexError, ValidationError)):
        return 2
    return 1


# -- argument types ---------------------------------------------------------

def probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number")
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{value} is outside [0, 1]")
    return value


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 1:
        raise argparse.ArgumentTypeError(f"{value} must be >= 1")
    return value


def class_count(text: str) -> int:
    value = positive_int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"{value} must be >= 2")
    return value


def non_negative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError(f"{value} must be >= 0")
    return value


def _require_out(value: Optional[str]) -> Path:
    resolved = get_output_dir(value)
    if not resolved:
        raise ConfigError("--out is required (or set TRANSITION_LOSS_OUTPUT_DIR)")
    return Path(resolved)


def _checkpoint_path(model: str) -> Path:
    path = Path(model)
    return path / CHECKPOINT_FILE if path.is_dir() else path


# -- subcommands ------------------------------------------------------------

def cmd_gen(args, loader: ConfigLoader) -> int:
    out = _require_out(args.out)
    defaults = loader.get_section("synthetic")
    seed = args.seed if args.seed is not None else defaults["seed"]
    base = SyntheticConfig(**{**defaults, "num_classes": args.classes, "seed": seed,
                              **({"vocab_size": args.vocab_size} if args.vocab_size else {}),
                              **({"signal_strength": args.signal_strength} if args.signal_strength is not None else {})})
    train_config = base.model_copy(update={"num_instances": args.train})
    test_config = base.model_copy(update={"num_instances": args.test})

    print(f"🔧 Generating {args.train} train / {args.test} test instances over {args.classes} classes...")
    train = generate_clean(train_config)
    train_bags = len({instance.bag_id for instance in train})
    test = generate_clean(test_config, bag_offset=train_bags)

    spec = NoiseSpec(transition=random_transition(args.classes, np.random.default_rng([seed, 1])),
                     keep_prob=args.noise_keep, keep_mode=args.keep_mode, signal_limit=base.signal_limit)
    train = corrupt_labels(train, spec, [seed, 2])
    test = corrupt_labels(test, spec, [seed, 3])

    out.mkdir(parents=True, exist_ok=True)
    write_dataset(train, out / TRAIN_FILE)
    write_dataset(test, out / TEST_FILE)
    write_transition_csv(spec.transition, out / TRANSITION_FILE)
    manifest = RunManifest(
        subcommand="gen", seed=seed,
        config={"synthetic": base.model_dump(mode="json"), "train": args.train, "test": args.test,
                "noise_keep": args.noise_keep, "keep_mode": args.keep_mode},
        outputs={name: file_sha256(out / name) for name in (TRAIN_FILE, TEST_FILE, TRANSITION_FILE)},
    )
    write_noise_spec(spec, out, extra={
        "synthetic": base.model_dump(mode="json"),
        "splits": {"train": args.train, "test": args.test, "train_bags": train_bags},
        "manifest": manifest.model_dump(mode="json"),
    })
    print(f"✅ Wrote {TRAIN_FILE}, {TEST_FILE}, {TRANSITION_FILE}, {METADATA_FILE} to {out}")
    return 0


def _resolve_train_config(args, loader: ConfigLoader) -> TrainConfig:
    settings = loader.get_section("training")
    if args.config:
        settings.update(load_training_overrides(args.config))
    flag_values = {
        "mode": args.mode,
        "seed": args.seed,
        "pretrain_epochs": args.pretrain_epochs,
        "main_epochs": args.main_epochs,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "inner_steps": args.inner_steps,
        "t_update_every": args.t_update_every,
    }
    settings.update({key: value for key, value in flag_values.items() if value is not None})
    return TrainConfig(**settings)


def _dataset_shape(data_dir: Path, instances) -> Dict[str, int]:
    """Class count and vocabulary size from the generator metadata, else from the data."""
    if (data_dir / METADATA_FILE).is_file():
        synthetic = read_metadata(data_dir).get("synthetic", {})
        if "num_classes" in synthetic and "vocab_size" in synthetic:
            return {"num_classes": synthetic["num_classes"], "vocab_size": synthetic["vocab_size"]}
    labels = [instance.noisy_label for instance in instances]
    labels += [instance.true_label for instance in instances if instance.true_label is not None]
    return {"num_classes": max(labels) + 1, "vocab_size": max(max(i.tokens) for i in instances) + 1}


def cmd_train(args, loader: ConfigLoader) -> int:
    out = _require_out(args.out)
    data_dir = Path(args.data)
    train_path = data_dir / TRAIN_FILE
    if not train_path.is_file():
        raise FileNotFoundError(f"training data not found: {train_path}")

    instances = read_dataset(train_path)
    if not instances:
        raise ConfigError(f"{train_path} holds no instances")
    shape = _dataset_shape(data_dir, instances)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / TRAIN_LOG_FILE
    log_file = open(log_path, "a" if args.resume else "w", encoding="utf-8")

    def sink(record: Dict[str, Any]):
        log_file.write(json.dumps(record, sort_keys=True) + "\n")

    try:
        if args.resume:
            checkpoint = load_checkpoint(args.resume, expected_num_classes=shape["num_classes"])
            if checkpoint.config is None:
                raise ConfigError(f"{args.resume} carries no training config to resume from")
            config = checkpoint.config
            trainer = Trainer.resume(checkpoint, MarkedCorpus.from_instances(instances, config.max_len), log_sink=sink)
            print(f"🔁 Resuming {config.mode.value} training from {args.resume} "
                  f"({trainer.progress.phase}, epoch {trainer.progress.epoch})")
        else:
            config = _resolve_train_config(args, loader)
            corpus = MarkedCorpus.from_instances(instances, config.max_len)
            trainer = Trainer(config, corpus, num_classes=shape["num_classes"], vocab_size=shape["vocab_size"],
                              log_sink=sink)
            print(f"🚀 Training mode {config.mode.value} on {len(instances)} instances, "
                  f"{shape['num_classes']} classes")

        checkpoint_path = out / CHECKPOINT_FILE
        trainer.fit(on_epoch_end=lambda t: t.save(checkpoint_path))
        trainer.save(checkpoint_path)
    finally:
        log_file.close()

    manifest = RunManifest(
        subcommand="train", seed=config.seed, config=config.model_dump(mode="json"),
        inputs={"data": str(data_dir), **({"resume": str(args.resume)} if args.resume else {})},
        outputs={name: file_sha256(out / name) for name in (CHECKPOINT_FILE, TRAIN_LOG_FILE)},
    )
    manifest.write(out / MANIFEST_FILE)
    print(f"\n📊 Results:")
    print(f"  • Steps: {trainer.progress.global_step}")
    print(f"  • EM updates: {trainer.progress.em_updates}")
    print(f"  • Skipped instances: {trainer.progress.skipped}")
    print(f"✅ Checkpoint written to {checkpoint_path}")
    return 0


def cmd_eval(args, loader: ConfigLoader) -> int:
    checkpoint = load_checkpoint(_checkpoint_path(args.model))
    params = checkpoint.params
    num_classes = params.num_classes
    data_path = Path(args.data)
    evaluation = loader.get_section("evaluation")
    na_class = args.na_class if args.na_class is not None else evaluation["na_class"]
    against = args.against or evaluation["against"]
    if not 0 <= na_class < num_classes:
        raise ConfigError(f"--na-class {na_class} outside [0, {num_classes})")

    instances = read_dataset(data_path)
    sidecar_dir = data_path.parent
    if (sidecar_dir / METADATA_FILE).is_file():
        data_classes = read_metadata(sidecar_dir).get("noise", {}).get("num_classes")
        if data_classes is not None and data_classes != num_classes:
            raise ShapeError(f"model over {num_classes} classes, data over {data_classes}")
    labels_seen = [i.noisy_label for i in instances] + [i.true_label for i in instances if i.true_label is not None]
    if labels_seen and max(labels_seen) >= num_classes:
        raise ShapeError(f"data label {max(labels_seen)} outside the model's {num_classes} classes")
    if against == "true":
        if any(instance.true_label is None for instance in instances):
            raise ConfigError("--against true needs true labels in the data")
        labels = [instance.true_label for instance in instances]
    else:
        labels = [instance.noisy_label for instance in instances]

    max_len = checkpoint.config.max_len if checkpoint.config is not None else 128
    corpus = MarkedCorpus.from_instances(instances, max_len)
    probs, _ = forward_probs(params, corpus)
    transition_truth = None
    if (sidecar_dir / TRANSITION_FILE).is_file():
        transition_truth = read_transition_csv(sidecar_dir / TRANSITION_FILE)

    report, points = build_report(
        predict_bags(params, corpus, na_class), bag_truths(labels, corpus.bag_ids), na_class,
        evaluation["p_at_n"], against=against, instance_truth=labels, instance_pred=probs.argmax(axis=1).tolist(),
        num_classes=num_classes, transition_estimate=params.transition, transition_truth=transition_truth)

    report_path = Path(args.report)
    write_report(report, report_path)
    table_path = report_path.with_suffix(".pr.tsv")
    write_pr_table(points, table_path)
    RunManifest(
        subcommand="eval", seed=checkpoint.header.get("seed"),
        config={"na_class": na_class, "against": against, "p_at_n": list(evaluation["p_at_n"])},
        inputs={"model": str(args.model), "data": str(data_path)},
        outputs={report_path.name: file_sha256(report_path), table_path.name: file_sha256(table_path)},
    ).write(Path(str(report_path) + ".manifest.json"))

    print(f"\n📊 Results ({against} labels):")
    for n, value in report.p_at_n.items():
        print(f"  • P@{n}: {value:.4f}")
    if report.average_precision is not None:
        print(f"  • AP: {report.average_precision:.4f}")
    if report.accuracy is not None:
        print(f"  • Accuracy: {report.accuracy:.4f}")
    if report.transition_max_abs is not None:
        print(f"  • T error: max {report.transition_max_abs:.4f}, mean {report.transition_mean_abs:.4f}")
    print(f"✅ Report written to {report_path}")
    return 0


def cmd_export_transition(args, loader: ConfigLoader) -> int:
    checkpoint = load_checkpoint(_checkpoint_path(args.model))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_transition_csv(checkpoint.params.transition, out)
    print(f"✅ Transition matrix ({checkpoint.params.num_classes}×{checkpoint.params.num_classes}) written to {out}")
    return 0


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transition-loss",
        description="Noisy-label training with explicit and implicit label transitions",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  transition-loss gen --classes 5 --train 10000 --test 2000 --noise-keep 0.7 --seed 1 --out data/
  transition-loss train --data data/ --mode both --out run/
  transition-loss eval --model run/ --data data/test.jsonl --na-class 0 --report run/report.json
  transition-loss export-transition --model run/ --out run/transition.csv
        """
    )
    parser.add_argument('--log-level', help='Logging level (default: logging.level from config.yaml)')
    parser.add_argument('--settings', help='Path to config.yaml with default settings')
    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen', help='Generate a synthetic noisy corpus')
    gen.add_argument('--classes', type=class_count, required=True, help='Number of classes K')
    gen.add_argument('--train', type=positive_int, required=True, help='Training instances')
    gen.add_argument('--test', type=positive_int, required=True, help='Test instances')
    gen.add_argument('--noise-keep', type=probability, required=True, help='Probability a label is kept correct')
    gen.add_argument('--keep-mode', choices=['constant', 'signal_fraction'], default='constant')
    gen.add_argument('--vocab-size', type=positive_int)
    gen.add_argument('--signal-strength', type=probability)
    gen.add_argument('--seed', type=int)
    gen.add_argument('--out', help='Output directory (default: $TRANSITION_LOSS_OUTPUT_DIR)')

    train = commands.add_parser('train', help='Train a model on a generated corpus')
    train.add_argument('--data', required=True, help='Directory holding train.jsonl')
    train.add_argument('--config', help='Training config file (flat or with a training: section)')
    train.add_argument('--mode', choices=[mode.value for mode in BaselineMode])
    train.add_argument('--seed', type=int)
    train.add_argument('--pretrain-epochs', type=non_negative_int)
    train.add_argument('--main-epochs', type=non_negative_int)
    train.add_argument('--learning-rate', type=float)
    train.add_argument('--batch-size', type=positive_int)
    train.add_argument('--inner-steps', type=positive_int, help='Explicit steps per EM cycle (J)')
    train.add_argument('--t-update-every', type=positive_int, help='EM cadence in instances (default: per epoch)')
    train.add_argument('--resume', help='Checkpoint to continue from')
    train.add_argument('--out', help='Output directory (default: $TRANSITION_LOSS_OUTPUT_DIR)')

    evaluate = commands.add_parser('eval', help='Evaluate a trained model')
    evaluate.add_argument('--model', required=True, help='Run directory or checkpoint file')
    evaluate.add_argument('--data', required=True, help='Dataset file to evaluate on')
    evaluate.add_argument('--na-class', type=non_negative_int)
    evaluate.add_argument('--against', choices=['true', 'noisy'])
    evaluate.add_argument('--report', required=True, help='Report file (JSON)')

    export = commands.add_parser('export-transition', help='Write the learned T as CSV')
    export.add_argument('--model', required=True, help='Run directory or checkpoint file')
    export.add_argument('--out', required=True, help='CSV file')
    return parser


COMMANDS = {
    'gen': cmd_gen,
    'train': cmd_train,
    'eval': cmd_eval,
    'export-transition': cmd_export_transition,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI function."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_request:
        return int(exit_request.code or 0)

    loader = ConfigLoader(args.settings)
    configure_logging(args.log_level or loader.get('logging.level', 'INFO'), loader.get('logging.format'))
    try:
        return COMMANDS[args.command](args, loader)
    except NumericError as e:
        print(f"❌ Numeric failure at step {e.step}: {e}", file=sys.stderr)
        return 3
    except (TransitionLossError, OSError, ValueError, IndexError) as e:
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
