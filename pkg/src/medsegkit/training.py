"""Training lifecycle: builder hooks, epoch loop, transparency artifacts, recovery.

A :class:`Trainer` owns one run. Subclasses provide the network through
``build_network`` (the only mandatory override) and may replace the
optimizer, scheduler, criterion, padding, or backward step through the other
builder hooks. Every run writes a timestamped experiment folder::

    {output_dir}/{TrainerClassName}/{YYYYMMDD-HHMM}/
        metrics.csv  latest.ckpt  best.ckpt  state.orb  log.txt
        plots/*.png  previews/epoch_{k}/*.png

Validation scores are negated losses, so "higher is better" holds for every
criterion and best-checkpoint selection is a single strict comparison.
Training state is serialized every epoch; ``recover_from`` +
``continue_training`` resume an interrupted run exactly.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import random
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .frontend import Frontend, NullFrontend
from .layers import PadToMultiple
from .losses import classify_logits
from .numerics import ScorePrediction, fit_quotient, predict_plateau
from .visualize import save_preview_set

BASE_CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "val_score", "lr", "epoch_seconds")


class SanityCheckError(RuntimeError):
    """The model's output shape does not match the labels."""


class RecoveryError(RuntimeError):
    """An experiment folder is missing artifacts needed for resumption."""


@dataclass
class TrainerToolbox:
    """Everything driving one run: model, optimizer, scheduler, criterion, EMA."""

    model: nn.Module
    optimizer: torch.optim.Optimizer
    scheduler: Any | None
    criterion: nn.Module
    ema_model: "EMAModel | None" = None

    @property
    def eval_model(self) -> nn.Module:
        """The weights used for validation and best-checkpoint selection."""
        return self.ema_model.module if self.ema_model is not None else self.model


@torch.no_grad()
def ema_update(
    ema_params: Iterable[torch.Tensor],
    model_params: Iterable[torch.Tensor],
    beta: float = 0.999,
) -> None:
    """In-place exponential moving average: ema <- beta*ema + (1-beta)*param."""
    for ema, param in zip(ema_params, model_params):
        ema.mul_(beta).add_(param, alpha=1.0 - beta)


class EMAModel:
    """Parameter-averaged shadow copy of a model, updated once per optimizer step."""

    def __init__(self, model: nn.Module, decay: float = 0.999) -> None:
        self.decay = decay
        self.module = copy.deepcopy(model)
        for p in self.module.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        ema_update(self.module.parameters(), model.parameters(), self.decay)
        for ema_buf, buf in zip(self.module.buffers(), model.buffers()):
            ema_buf.copy_(buf)


@dataclass
class StateOrb:
    """Serialized training state enabling exact resumption."""

    epoch: int
    best_score: float
    train_args: dict
    rng_state: dict
    epoch_durations: list[float] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        torch.save(self.__dict__, path)

    @classmethod
    def load(cls, path: str | Path) -> "StateOrb":
        payload = torch.load(path, weights_only=False)
        return cls(**payload)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def estimate_macs(model: nn.Module, example: torch.Tensor) -> int:
    """Multiply-accumulate count of convolution and affine layers, per example."""
    total = 0

    def conv_hook(module: nn.Module, inputs, output) -> None:
        nonlocal total
        kernel = math.prod(module.kernel_size)
        if isinstance(module, (nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
            per_example = inputs[0][0].numel()  # in_channels * in_spatial
            total += per_example * (module.out_channels // module.groups) * kernel
        else:
            per_example = output[0].numel()  # out_channels * out_spatial
            total += per_example * (module.in_channels // module.groups) * kernel

    def linear_hook(module: nn.Module, inputs, output) -> None:
        nonlocal total
        total += output[0].numel() * module.in_features

    handles = []
    for module in model.modules():
        if isinstance(
            module,
            (nn.Conv1d, nn.Conv2d, nn.Conv3d, nn.ConvTranspose1d, nn.ConvTranspose2d, nn.ConvTranspose3d),
        ):
            handles.append(module.register_forward_hook(conv_hook))
        elif isinstance(module, nn.Linear):
            handles.append(module.register_forward_hook(linear_hook))
    was_training = model.training
    try:
        model.eval()
        with torch.no_grad():
            model(example[:1])
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    return total


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """Plain-text table with a header rule, for console and log output."""
    text_rows = [[str(v) for v in row] for row in rows]
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in text_rows)) if text_rows else len(headers[i])
        for i in range(len(headers))
    ]
    def line(cells: Sequence[str]) -> str:
        return " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([line(list(headers)), rule] + [line(r) for r in text_rows])


@dataclass
class ValidationCase:
    index: int
    case_id: str
    loss: float
    score: float
    extras: dict[str, float] = field(default_factory=dict)


@dataclass
class ValidationResult:
    mean_loss: float
    mean_score: float
    cases: list[ValidationCase]
    worst: ValidationCase
    worst_tensors: tuple[torch.Tensor, torch.Tensor, torch.Tensor]  # image, label, pred


_UNSET = object()


class Trainer:
    """Training lifecycle driver; subclasses must override ``build_network``."""

    ema: bool = False
    ema_decay: float = 0.999
    prediction_warmup: int = 20
    plateau_fraction: float = 0.95

    def __init__(
        self,
        output_dir: str | Path,
        train_loader,
        val_loader,
        device: str | torch.device = "cpu",
        frontend: Frontend | None = None,
    ) -> None:
        self.output_dir = Path(output_dir)
        self.train_loader = train_loader
        self.val_loader = val_loader
        self.device = torch.device(device)
        self.frontend: Frontend = frontend if frontend is not None else NullFrontend()

        self.toolbox: TrainerToolbox | None = None
        self.padding: PadToMultiple | None = None
        self.sanity_report: dict | None = None
        self.last_prediction: ScorePrediction | None = None
        self.prediction_log: list[tuple[int, ScorePrediction | None]] = []

        self._planned_epochs: int | None = None
        self._example_shape: tuple[int, ...] | None = None
        self._example_batch: tuple[torch.Tensor, torch.Tensor] | None = None
        self._experiment_folder: Path | None = None
        self._logger: logging.Logger | None = None
        self._epoch = 0
        self._best_score = -math.inf
        self._best_epoch = 0
        self._epoch_durations: list[float] = []
        self._score_history: list[float] = []
        self._csv_columns: list[str] | None = None
        self._rows: list[dict] = []
        self._train_args: dict = {}
        self._recovered_args: dict | None = None

    # ------------------------------------------------------------------
    # Builder hooks
    # ------------------------------------------------------------------

    def build_network(self, example_shape: tuple[int, ...]) -> nn.Module:
        raise NotImplementedError(
            f"{type(self).__name__} must override build_network() to supply a model"
        )

    def build_padding_module(self) -> PadToMultiple | None:
        return None

    def build_optimizer(self, params) -> torch.optim.Optimizer:
        return torch.optim.SGD(params, lr=1e-2)

    def build_scheduler(self, optimizer) -> Any | None:
        return None

    def build_criterion(self) -> nn.Module:
        raise NotImplementedError(
            f"{type(self).__name__} must override build_criterion() or use a preset"
        )

    def backward(self, loss: torch.Tensor) -> None:
        loss.backward()

    def val_case_metrics(self, pred: torch.Tensor, label: torch.Tensor) -> dict[str, float]:
        """Extra per-case validation metrics appended to the CSV; base: none."""
        return {}

    def config_snapshot(self) -> dict:
        return {"ema": self.ema, "ema_decay": self.ema_decay}

    def apply_config(self, config: Mapping) -> None:
        for key, value in config.items():
            if hasattr(type(self), key) or hasattr(self, key):
                setattr(self, key, value)

    # ------------------------------------------------------------------
    # Toolbox and sanity check
    # ------------------------------------------------------------------

    def _peek_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        if self._example_batch is None:
            images, labels = next(iter(self.train_loader))
            self._example_batch = (images, labels)
        return self._example_batch

    @property
    def example_shape(self) -> tuple[int, ...]:
        if self._example_shape is None:
            images, _ = self._peek_batch()
            self._example_shape = tuple(images.shape[1:])
        return self._example_shape

    def build_toolbox(self) -> TrainerToolbox:
        model = self.build_network(self.example_shape)
        if not isinstance(model, nn.Module):
            raise TypeError(f"build_network() must return a module, got {type(model)!r}")
        model = model.to(self.device)
        self.padding = self.build_padding_module()
        optimizer = self.build_optimizer(model.parameters())
        scheduler = self.build_scheduler(optimizer)
        criterion = self.build_criterion()
        if isinstance(criterion, nn.Module):
            criterion = criterion.to(self.device)
        ema_model = EMAModel(model, self.ema_decay) if self.ema else None
        self.toolbox = TrainerToolbox(
            model=model,
            optimizer=optimizer,
            scheduler=scheduler,
            criterion=criterion,
            ema_model=ema_model,
        )
        return self.toolbox

    def _forward(self, model: nn.Module, images: torch.Tensor):
        if self.padding is None:
            return model(images)
        padded = self.padding(images)
        outputs = model(padded)
        if isinstance(outputs, (list, tuple)):
            return [self.padding.crop(out, scale=2**i) for i, out in enumerate(outputs)]
        return self.padding.crop(outputs)

    def sanity_check(self) -> dict:
        """Validate output shape against labels; report parameters and MACs.

        Runs one forward pass without gradients before the first epoch and
        aborts with the expected/actual shapes on mismatch.
        """
        if self.toolbox is None:
            self.build_toolbox()
        assert self.toolbox is not None
        images, labels = self._peek_batch()
        images = images.to(self.device).float()
        labels = labels.to(self.device)
        model = self.toolbox.model
        was_training = model.training
        model.eval()
        try:
            with torch.no_grad():
                outputs = self._forward(model, images[:1])
        finally:
            model.train(was_training)
        primary = outputs[0] if isinstance(outputs, (list, tuple)) else outputs
        label_spatial = tuple(labels.shape[2:] if labels.dim() == images.dim() else labels.shape[1:])
        output_spatial = tuple(primary.shape[2:])
        if output_spatial != label_spatial:
            raise SanityCheckError(
                f"output spatial shape {output_spatial} does not match label "
                f"spatial shape {label_spatial}"
            )
        report = {
            "output_shape_ok": True,
            "param_count": count_parameters(model),
            "mac_estimate": self._estimate_macs(images),
            "output_shape": tuple(primary.shape),
            "label_spatial_shape": label_spatial,
        }
        self.sanity_report = report
        return report

    def _estimate_macs(self, images: torch.Tensor) -> int:
        assert self.toolbox is not None
        example = self.padding(images[:1]) if self.padding is not None else images[:1]
        return estimate_macs(self.toolbox.model, example)

    # ------------------------------------------------------------------
    # Experiment folder, logging, CSV
    # ------------------------------------------------------------------

    @property
    def experiment_folder(self) -> Path | None:
        return self._experiment_folder

    def _ensure_experiment_folder(self) -> Path:
        if self._experiment_folder is None:
            stamp = datetime.now().strftime("%Y%m%d-%H%M")
            base = self.output_dir / type(self).__name__
            folder = base / stamp
            suffix = 2
            while folder.exists():
                folder = base / f"{stamp}-{suffix}"
                suffix += 1
            folder.mkdir(parents=True)
            self._experiment_folder = folder
        (self._experiment_folder / "plots").mkdir(exist_ok=True)
        (self._experiment_folder / "previews").mkdir(exist_ok=True)
        return self._experiment_folder

    def _ensure_logger(self) -> logging.Logger:
        if self._logger is None:
            folder = self._ensure_experiment_folder()
            logger = logging.getLogger(f"medsegkit.trainer.{id(self):x}")
            logger.setLevel(logging.INFO)
            logger.propagate = False
            logger.handlers.clear()
            file_handler = logging.FileHandler(folder / "log.txt", encoding="utf-8")
            file_handler.setFormatter(logging.Formatter("%(asctime)s  %(message)s"))
            stream_handler = logging.StreamHandler(sys.stdout)
            stream_handler.setFormatter(logging.Formatter("%(message)s"))
            logger.addHandler(file_handler)
            logger.addHandler(stream_handler)
            self._logger = logger
        return self._logger

    def _log(self, message: str) -> None:
        self._ensure_logger().info(message)

    def _csv_path(self) -> Path:
        return self._ensure_experiment_folder() / "metrics.csv"

    def _append_csv_row(self, row: dict) -> None:
        path = self._csv_path()
        if self._csv_columns is None:
            extras = sorted(k for k in row if k not in BASE_CSV_COLUMNS)
            self._csv_columns = list(BASE_CSV_COLUMNS) + extras
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(self._csv_columns)
        with open(path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([row.get(col, "") for col in self._csv_columns])
        self._rows.append(row)

    def _restore_rows_from_csv(self) -> None:
        path = self._csv_path()
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            columns = list(reader.fieldnames or [])
            rows = [r for r in reader if r.get("epoch")]
        kept = [r for r in rows if int(r["epoch"]) <= self._epoch]
        if len(kept) != len(rows):  # crash landed between CSV append and orb save
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(columns)
                for r in kept:
                    writer.writerow([r.get(c, "") for c in columns])
        self._csv_columns = columns
        self._rows = [
            {k: (int(v) if k == "epoch" else float(v)) for k, v in r.items() if v != ""}
            for r in kept
        ]
        self._score_history = [float(r["val_score"]) for r in self._rows]
        if self._score_history:
            best_index = int(np.argmax(self._score_history))
            self._best_epoch = int(self._rows[best_index]["epoch"])

    # ------------------------------------------------------------------
    # Training loop
    # ------------------------------------------------------------------

    def train(self, epochs: int, early_stop_tolerance: int | None = None) -> None:
        """Run the epoch loop up to ``epochs`` total completed epochs."""
        self._run(int(epochs), early_stop_tolerance, resumed=False)

    def continue_training(self, epochs: int | None = None, early_stop_tolerance=_UNSET) -> None:
        """Resume a recovered run with its original arguments unless overridden."""
        if self._recovered_args is None:
            raise RecoveryError("continue_training() requires a trainer built by recover_from()")
        args = self._recovered_args
        total = int(epochs) if epochs is not None else int(args["epochs"])
        tolerance = (
            args.get("early_stop_tolerance")
            if early_stop_tolerance is _UNSET
            else early_stop_tolerance
        )
        self._run(total, tolerance, resumed=True)

    def _run(self, epochs: int, early_stop_tolerance: int | None, resumed: bool) -> None:
        if epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {epochs}")
        self._planned_epochs = epochs
        if self.toolbox is None:
            self.build_toolbox()
        assert self.toolbox is not None
        toolbox = self.toolbox
        if toolbox.scheduler is not None and hasattr(toolbox.scheduler, "total_epochs"):
            toolbox.scheduler.total_epochs = epochs
        folder = self._ensure_experiment_folder()
        self._ensure_logger()
        self._train_args = {
            "trainer_class": type(self).__name__,
            "epochs": epochs,
            "early_stop_tolerance": early_stop_tolerance,
            "device": str(self.device),
            "example_shape": list(self.example_shape),
            "config": self.config_snapshot(),
        }
        self._notify(
            "on_run_start",
            {
                "trainer": type(self).__name__,
                "epochs": epochs,
                "device": str(self.device),
                "resumed": resumed,
                "start_epoch": self._epoch + 1,
                **self.config_snapshot(),
            },
        )
        if not resumed and self._epoch == 0:
            report = self.sanity_check()
            self._log(
                f"sanity check passed: output {report['output_shape']}, "
                f"{report['param_count']:,} parameters, "
                f"~{report['mac_estimate']:,} MACs per example"
            )
        if resumed:
            self._log(f"recovered run at epoch {self._epoch}, best score {self._best_score:.6f}")

        stopped_early = False
        for epoch in range(self._epoch + 1, epochs + 1):
            start = time.perf_counter()
            lr = float(toolbox.optimizer.param_groups[0]["lr"])
            train_loss = self._train_epoch(epoch)
            if toolbox.scheduler is not None:
                toolbox.scheduler.step()
            result = self._validate()
            duration = time.perf_counter() - start

            self._epoch = epoch
            self._epoch_durations.append(duration)
            self._score_history.append(result.mean_score)
            improved = result.mean_score > self._best_score
            if improved:
                self._best_score = result.mean_score
                self._best_epoch = epoch
                self._save_best()

            row: dict[str, Any] = {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": result.mean_loss,
                "val_score": result.mean_score,
                "lr": lr,
                "epoch_seconds": duration,
            }
            mean_extras: dict[str, float] = {}
            if result.cases and result.cases[0].extras:
                for key in result.cases[0].extras:
                    mean_extras[key] = float(np.mean([c.extras[key] for c in result.cases]))
            row.update(mean_extras)
            self._append_csv_row(row)
            self._render_plots()
            self._save_previews(epoch, result)
            self.last_prediction = self._maybe_predict()
            self.prediction_log.append((epoch, self.last_prediction))
            self._notify("on_epoch_end", dict(row, best_score=self._best_score))
            self._save_latest()
            self._save_orb()
            self._log_epoch(epoch, epochs, row, result, improved)

            if early_stop_tolerance is not None and epoch - self._best_epoch >= early_stop_tolerance:
                self._log(
                    f"early stop: no improvement for {epoch - self._best_epoch} epochs "
                    f"(tolerance {early_stop_tolerance})"
                )
                stopped_early = True
                break

        self._notify(
            "on_run_end",
            {
                "best_score": self._best_score,
                "best_epoch": self._best_epoch,
                "epochs_completed": self._epoch,
                "stopped_early": stopped_early,
                "experiment_folder": str(folder),
            },
        )

    def _train_epoch(self, epoch: int) -> float:
        assert self.toolbox is not None
        toolbox = self.toolbox
        toolbox.model.train()
        total = 0.0
        batches = 0
        for index, (images, labels) in enumerate(self.train_loader):
            images = images.to(self.device).float()
            labels = labels.to(self.device)
            outputs = self._forward(toolbox.model, images)
            loss = toolbox.criterion(outputs, labels)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite training loss {loss.item()} at epoch {epoch}, batch {index}"
                )
            toolbox.optimizer.zero_grad(set_to_none=True)
            self.backward(loss)
            toolbox.optimizer.step()
            if toolbox.ema_model is not None:
                toolbox.ema_model.update(toolbox.model)
            total += float(loss.detach())
            batches += 1
        if batches == 0:
            raise RuntimeError("training loader produced no batches")
        return total / batches

    def _predict_labels(self, logits: torch.Tensor) -> torch.Tensor:
        num_classes = getattr(self, "num_classes", None)
        if num_classes is None:
            num_classes = 1 if logits.shape[1] == 1 else int(logits.shape[1])
        return classify_logits(logits, num_classes).squeeze(0)

    def _val_case_id(self, index: int) -> str:
        dataset = getattr(self.val_loader, "dataset", None)
        if dataset is not None and hasattr(dataset, "case_id"):
            try:
                return dataset.case_id(index)
            except Exception:
                pass
        return str(index)

    def _validate(self) -> ValidationResult:
        assert self.toolbox is not None
        toolbox = self.toolbox
        model = toolbox.eval_model
        model.eval()
        cases: list[ValidationCase] = []
        worst: ValidationCase | None = None
        worst_tensors: tuple[torch.Tensor, torch.Tensor, torch.Tensor] | None = None
        index = 0
        with torch.no_grad():
            for images, labels in self.val_loader:
                images = images.to(self.device).float()
                labels = labels.to(self.device)
                outputs = self._forward(model, images)
                is_multi = isinstance(outputs, (list, tuple))
                primary = outputs[0] if is_multi else outputs
                for j in range(images.shape[0]):
                    out_j = [o[j : j + 1] for o in outputs] if is_multi else outputs[j : j + 1]
                    loss_j = float(toolbox.criterion(out_j, labels[j : j + 1]))
                    pred_j = self._predict_labels(primary[j : j + 1])
                    case = ValidationCase(
                        index=index,
                        case_id=self._val_case_id(index),
                        loss=loss_j,
                        score=-loss_j,
                        extras=self.val_case_metrics(pred_j, labels[j]),
                    )
                    cases.append(case)
                    if worst is None or case.score < worst.score:
                        worst = case
                        worst_tensors = (
                            images[j].detach().cpu(),
                            labels[j].detach().cpu(),
                            pred_j.detach().cpu(),
                        )
                    index += 1
        if not cases:
            raise RuntimeError("validation loader produced no cases")
        assert worst is not None and worst_tensors is not None
        mean_loss = float(np.mean([c.loss for c in cases]))
        return ValidationResult(
            mean_loss=mean_loss,
            mean_score=-mean_loss,
            cases=cases,
            worst=worst,
            worst_tensors=worst_tensors,
        )

    # ------------------------------------------------------------------
    # Artifacts
    # ------------------------------------------------------------------

    def _save_previews(self, epoch: int, result: ValidationResult) -> None:
        folder = self._ensure_experiment_folder() / "previews" / f"epoch_{epoch}"
        try:
            image, label, pred = result.worst_tensors
            save_preview_set(
                folder, image, label, pred, num_classes=getattr(self, "num_classes", None)
            )
        except Exception as err:
            self._log(f"warning: could not write previews for epoch {epoch}: {err}")

    def _render_plots(self) -> None:
        folder = self._ensure_experiment_folder() / "plots"
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt

            epochs = [r["epoch"] for r in self._rows]

            def series(key: str) -> list[float]:
                return [float(r[key]) for r in self._rows]

            fig, ax = plt.subplots(figsize=(7, 4))
            ax.plot(epochs, series("train_loss"), label="train loss")
            ax.plot(epochs, series("val_loss"), label="val loss")
            ax.set_xlabel("epoch")
            ax.set_ylabel("loss")
            twin = ax.twinx()
            twin.plot(epochs, series("val_score"), color="tab:green", label="val score")
            twin.set_ylabel("val score")
            lines, labels_ = ax.get_legend_handles_labels()
            lines2, labels2 = twin.get_legend_handles_labels()
            ax.legend(lines + lines2, labels_ + labels2, loc="best")
            fig.tight_layout()
            fig.savefig(folder / "progress.png")
            plt.close(fig)

            simple = [
                ("val_score", "val_score.png", "validation score"),
                ("lr", "learning_rate.png", "learning rate"),
                ("epoch_seconds", "epoch_seconds.png", "epoch duration (s)"),
            ]
            for key, filename, ylabel in simple:
                fig, ax = plt.subplots(figsize=(7, 4))
                ax.plot(epochs, series(key))
                ax.set_xlabel("epoch")
                ax.set_ylabel(ylabel)
                fig.tight_layout()
                fig.savefig(folder / filename)
                plt.close(fig)

            extra_keys = [
                k for k in (self._csv_columns or []) if k not in BASE_CSV_COLUMNS
            ]
            if extra_keys:
                fig, ax = plt.subplots(figsize=(7, 4))
                for key in extra_keys:
                    ax.plot(epochs, [float(r.get(key, math.nan)) for r in self._rows], label=key)
                ax.set_xlabel("epoch")
                ax.set_ylabel("metric")
                ax.legend(loc="best")
                fig.tight_layout()
                fig.savefig(folder / "val_metrics.png")
                plt.close(fig)
        except Exception as err:
            self._log(f"warning: could not render plots: {err}")

    def _maybe_predict(self) -> ScorePrediction | None:
        if len(self._score_history) < self.prediction_warmup:
            return None
        try:
            model = fit_quotient(
                range(1, len(self._score_history) + 1), self._score_history
            )
        except ValueError:
            return None
        mean_seconds = float(np.mean(self._epoch_durations)) if self._epoch_durations else 1.0
        return predict_plateau(
            model,
            current_epoch=self._epoch,
            mean_epoch_seconds=mean_seconds,
            plateau_fraction=self.plateau_fraction,
        )

    def _log_epoch(
        self,
        epoch: int,
        total_epochs: int,
        row: dict,
        result: ValidationResult,
        improved: bool,
    ) -> None:
        summary = format_table(
            ["epoch", "train_loss", "val_loss", "val_score", "lr", "seconds"],
            [[
                f"{epoch}/{total_epochs}",
                f"{row['train_loss']:.6f}",
                f"{row['val_loss']:.6f}",
                f"{row['val_score']:.6f}",
                f"{row['lr']:.2e}",
                f"{row['epoch_seconds']:.2f}",
            ]],
        )
        self._log("\n" + summary)
        extra_keys = sorted(result.cases[0].extras) if result.cases[0].extras else []
        case_rows = []
        for case in result.cases:
            marker = " <- worst" if case.index == result.worst.index else ""
            case_rows.append(
                [case.case_id, f"{case.loss:.6f}", f"{case.score:.6f}"]
                + [f"{case.extras[k]:.4f}" for k in extra_keys]
                + [marker]
            )
        table = format_table(["case", "loss", "score", *extra_keys, ""], case_rows)
        self._log("\n" + table)
        if improved:
            self._log(f"new best score {self._best_score:.6f} at epoch {epoch}; best.ckpt updated")
        if self.last_prediction is not None:
            p = self.last_prediction
            self._log(
                f"score prediction: plateau ~{p.max_score:.4f} around epoch "
                f"{p.target_epoch:.0f}; ETC {p.etc_seconds:.0f}s"
            )

    # ------------------------------------------------------------------
    # State persistence and recovery
    # ------------------------------------------------------------------

    def _save_best(self) -> None:
        assert self.toolbox is not None
        state = {
            k: v.detach().cpu().clone() for k, v in self.toolbox.eval_model.state_dict().items()
        }
        torch.save(
            {"model": state, "score": self._best_score, "epoch": self._best_epoch},
            self._ensure_experiment_folder() / "best.ckpt",
        )

    def _save_latest(self) -> None:
        assert self.toolbox is not None
        toolbox = self.toolbox
        payload = {
            "epoch": self._epoch,
            "model": toolbox.model.state_dict(),
            "optimizer": toolbox.optimizer.state_dict(),
            "scheduler": toolbox.scheduler.state_dict() if toolbox.scheduler is not None else None,
            "criterion": toolbox.criterion.state_dict(),
            "ema_model": toolbox.ema_model.module.state_dict() if toolbox.ema_model else None,
        }
        torch.save(payload, self._ensure_experiment_folder() / "latest.ckpt")

    def _rng_snapshot(self) -> dict:
        state: dict[str, Any] = {
            "torch": torch.get_rng_state(),
            "numpy": np.random.get_state(),
            "python": random.getstate(),
        }
        if torch.cuda.is_available():
            state["cuda"] = torch.cuda.get_rng_state_all()
        for name, loader in (("train", self.train_loader), ("val", self.val_loader)):
            dataset = getattr(loader, "dataset", None)
            if hasattr(dataset, "rng_state"):
                state[f"dataset_{name}"] = dataset.rng_state()
        return state

    def _rng_restore(self, state: Mapping) -> None:
        torch.set_rng_state(state["torch"])
        np.random.set_state(state["numpy"])
        random.setstate(state["python"])
        if "cuda" in state and torch.cuda.is_available():
            torch.cuda.set_rng_state_all(state["cuda"])
        for name, loader in (("train", self.train_loader), ("val", self.val_loader)):
            key = f"dataset_{name}"
            dataset = getattr(loader, "dataset", None)
            if key in state and hasattr(dataset, "set_rng_state"):
                dataset.set_rng_state(state[key])

    def _save_orb(self) -> None:
        orb = StateOrb(
            epoch=self._epoch,
            best_score=self._best_score,
            train_args=self._train_args,
            rng_state=self._rng_snapshot(),
            epoch_durations=list(self._epoch_durations),
        )
        orb.save(self._ensure_experiment_folder() / "state.orb")

    def _notify(self, method: str, payload: dict) -> None:
        try:
            getattr(self.frontend, method)(payload)
        except Exception as err:
            self._log(f"warning: frontend {method} failed: {err}")

    @classmethod
    def recover_from(
        cls,
        folder: str | Path,
        train_loader,
        val_loader,
        device: str | torch.device | None = None,
        frontend: Frontend | None = None,
    ) -> "Trainer":
        """Rebuild a trainer from a serialized experiment folder.

        Restores model, optimizer, scheduler, criterion, EMA, RNG snapshots,
        the epoch counter, and the best score; ``continue_training()`` then
        resumes at epoch + 1.
        """
        folder = Path(folder)
        required = {
            "state orb": folder / "state.orb",
            "latest checkpoint": folder / "latest.ckpt",
            "metrics CSV": folder / "metrics.csv",
        }
        missing = [name for name, path in required.items() if not path.exists()]
        if missing:
            raise RecoveryError(f"cannot recover from {folder}: missing {', '.join(missing)}")
        orb = StateOrb.load(required["state orb"])
        args = orb.train_args

        trainer = cls(
            folder.parent.parent,
            train_loader,
            val_loader,
            device=device if device is not None else args.get("device", "cpu"),
            frontend=frontend,
        )
        trainer.apply_config(args.get("config", {}))
        trainer._experiment_folder = folder
        trainer._recovered_args = args
        trainer._example_shape = tuple(args["example_shape"])
        trainer.build_toolbox()
        assert trainer.toolbox is not None
        try:
            payload = torch.load(required["latest checkpoint"], weights_only=False)
            trainer.toolbox.model.load_state_dict(payload["model"])
            trainer.toolbox.optimizer.load_state_dict(payload["optimizer"])
            if trainer.toolbox.scheduler is not None and payload.get("scheduler") is not None:
                trainer.toolbox.scheduler.load_state_dict(payload["scheduler"])
            if payload.get("criterion") is not None:
                trainer.toolbox.criterion.load_state_dict(payload["criterion"])
            if trainer.toolbox.ema_model is not None and payload.get("ema_model") is not None:
                trainer.toolbox.ema_model.module.load_state_dict(payload["ema_model"])
        except RecoveryError:
            raise
        except Exception as err:
            raise RecoveryError(f"corrupt checkpoint in {folder}: {err}") from err
        trainer._epoch = int(orb.epoch)
        trainer._best_score = float(orb.best_score)
        trainer._epoch_durations = list(orb.epoch_durations)
        trainer._restore_rows_from_csv()
        trainer._rng_restore(orb.rng_state)
        return trainer
