"""Command-line surface: inspect, train, predict, evaluate.

``train`` is driven by a JSON config (see ``RunConfig``); ``MEDSEGKIT_OUTPUT_DIR``
and ``MEDSEGKIT_DEVICE`` override the output directory and device from the
environment. Every failure prints a single ``error:`` line and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from torch.utils.data import DataLoader

from .bundles import BUNDLES, get_bundle
from .data import BinarizedDataset, NNUNetDataset, inspect
from .evaluation import Evaluator
from .frontend import FileFrontend, HttpFrontend, NullFrontend, create_hybrid_frontend
from .metrics import binary_dice, dice_similarity_coefficient


@dataclass
class RunConfig:
    """Schema of the ``train`` subcommand's JSON config file."""

    dataset: str
    split: str = "Tr"
    fold: dict = field(default_factory=lambda: {"k": 5, "index": 0, "seed": 0})
    trainer: str = "unet"
    num_classes: int = 1
    num_dims: int = 2
    epochs: int = 100
    early_stop_tolerance: int | None = None
    deep_supervision: bool = False
    ema: bool = False
    binarize: bool = False
    batch_size: int = 2
    val_batch_size: int = 1
    base_lr: float | None = None
    output_dir: str = "experiments"
    device: str = "cpu"
    frontend: dict | list | None = None
    bundle_options: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


def _build_frontend(spec: dict | list | None):
    if spec is None:
        return NullFrontend()
    if isinstance(spec, list):
        return create_hybrid_frontend([_build_frontend(s) for s in spec])
    kind = spec.get("type")
    if kind == "file":
        return FileFrontend(spec["path"])
    if kind == "http":
        return HttpFrontend(spec["base_url"], spec.get("experiment", "medsegkit"))
    raise ValueError(f"unknown frontend type {kind!r} (expected 'file' or 'http')")


def _cmd_inspect(args: argparse.Namespace) -> int:
    dataset = NNUNetDataset(args.dataset_dir, split=args.split)
    report = inspect(dataset)
    if args.out:
        report.save(args.out)
        print(f"report written to {args.out}")
    else:
        print(report.to_json())
    print(f"roi_shape: {list(report.roi_shape)}")
    print(f"class totals: {report.total_class_counts}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config)
    output_dir = os.environ.get("MEDSEGKIT_OUTPUT_DIR", config.output_dir)
    device = os.environ.get("MEDSEGKIT_DEVICE", config.device)
    bundle = get_bundle(config.trainer)

    dataset = NNUNetDataset(config.dataset, split=config.split)
    if config.binarize:
        dataset = BinarizedDataset(dataset)
    fold = config.fold or {}
    train_ds, val_ds = dataset.fold(
        fold=int(fold.get("index", 0)), k=int(fold.get("k", 5)), seed=int(fold.get("seed", 0))
    )
    train_loader = DataLoader(train_ds, batch_size=config.batch_size, shuffle=True)
    val_loader = DataLoader(val_ds, batch_size=config.val_batch_size)
    frontend = _build_frontend(config.frontend)

    if args.resume:
        trainer = bundle.trainer_cls.recover_from(
            args.resume, train_loader, val_loader, device=device, frontend=frontend
        )
        trainer.continue_training(config.epochs, config.early_stop_tolerance)
    else:
        trainer = bundle.trainer_cls(output_dir, train_loader, val_loader, device=device, frontend=frontend)
        trainer.num_classes = config.num_classes
        trainer.num_dims = config.num_dims
        trainer.deep_supervision = config.deep_supervision
        trainer.ema = config.ema
        if config.base_lr is not None:
            trainer.base_lr = config.base_lr
        for key, value in config.bundle_options.items():
            if not hasattr(type(trainer), key):
                raise ValueError(f"unknown bundle option {key!r} for {config.trainer}")
            setattr(trainer, key, value)
        trainer.train(config.epochs, early_stop_tolerance=config.early_stop_tolerance)
    print(f"experiment folder: {trainer.experiment_folder}")
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    from .inference import parse_predictant

    device = os.environ.get("MEDSEGKIT_DEVICE", args.device)
    bundle = get_bundle(args.bundle)
    if args.example_shape:
        example_shape = tuple(int(v) for v in args.example_shape.split(","))
    else:
        first = parse_predictant(args.input)[0][1]
        data = first.data if hasattr(first, "data") else first
        example_shape = tuple(data.shape)
    predictor = bundle.predictor_cls(args.experiment, example_shape=example_shape, device=device)
    written = predictor.predict_to_file(args.input, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    if args.num_classes > 1:
        def dice(pred, label, _n=args.num_classes):
            return dice_similarity_coefficient(pred, label, _n)
        dice.__name__ = "dice"
        evaluator = Evaluator(dice)
    else:
        evaluator = Evaluator(binary_dice)
    result = evaluator.evaluate(args.pred, args.label)
    if args.out:
        result.save(args.out)
        print(f"result written to {args.out}")
    else:
        print(result.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medsegkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_inspect = sub.add_parser("inspect", help="scan a dataset and derive the ROI shape")
    p_inspect.add_argument("dataset_dir")
    p_inspect.add_argument("--split", default="Tr")
    p_inspect.add_argument("--out", default=None, help="write the JSON report here (default: stdout)")
    p_inspect.set_defaults(func=_cmd_inspect)

    p_train = sub.add_parser("train", help="train a bundle from a JSON run config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None, help="experiment folder to recover and continue")
    p_train.set_defaults(func=_cmd_train)

    p_predict = sub.add_parser("predict", help="predict label files from a trained experiment")
    p_predict.add_argument("--experiment", required=True)
    p_predict.add_argument("--input", required=True)
    p_predict.add_argument("--out", required=True)
    p_predict.add_argument("--bundle", default="unet", choices=sorted(BUNDLES))
    p_predict.add_argument("--device", default="cpu")
    p_predict.add_argument(
        "--example-shape", default=None, help="comma-separated, e.g. 3,384,384 (default: inferred)"
    )
    p_predict.set_defaults(func=_cmd_predict)

    p_eval = sub.add_parser("evaluate", help="score predictions against labels")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--label", required=True)
    p_eval.add_argument("--num-classes", type=int, default=1)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
