"""Prediction from trained experiment folders.

A :class:`Predictor` mirrors the trainer's ``build_network`` contract. The
checkpoint is loaded lazily on first use (``best.ckpt``, falling back to
``latest.ckpt``); inputs are padded to the divisor, forwarded, and cropped
back, so arbitrary spatial sizes round-trip exactly. ``parse_predictant``
normalizes file paths, directories, tensors, and datasets into an ordered
list of (id, image) entries.
"""

from __future__ import annotations

import logging
from pathlib import Path

import torch
from torch import nn

from .data.datasets import SupervisedDataset
from .data.io import (
    SUPPORTED_EXTENSIONS,
    ImageVolume,
    load_image,
    save_image,
    strip_image_suffix,
)
from .layers import PadToMultiple
from .losses import classify_logits

logger = logging.getLogger(__name__)


class CheckpointError(RuntimeError):
    """No usable checkpoint could be found or loaded."""


def parse_predictant(
    source, is_label: bool = False
) -> list[tuple[str, ImageVolume | torch.Tensor]]:
    """Normalize a prediction source into ordered (id, image) entries.

    Files map to their stem; directories yield one entry per supported file in
    lexicographic order (unsupported files are skipped with a warning);
    tensors get the id ``tensor_0``; datasets contribute their case ids.
    """
    if isinstance(source, torch.Tensor):
        return [("tensor_0", source)]
    if isinstance(source, SupervisedDataset):
        component = 1 if is_label else 0
        return [(source.case_id(i), source.fetch(i)[component]) for i in range(len(source))]
    path = Path(source)
    if path.is_dir():
        entries: list[tuple[str, ImageVolume | torch.Tensor]] = []
        for child in sorted(path.iterdir()):
            if not child.is_file():
                continue
            if not str(child).lower().endswith(SUPPORTED_EXTENSIONS):
                logger.warning("skipping unsupported file %s", child)
                continue
            entries.append((strip_image_suffix(child), load_image(child, is_label=is_label)))
        if not entries:
            raise ValueError(f"directory {path} contains no supported image files")
        return entries
    if path.is_file():
        return [(strip_image_suffix(path), load_image(path, is_label=is_label))]
    raise ValueError(f"cannot interpret predictant {source!r}: no such file or directory")


class Predictor:
    """Lazy-loading predictor; subclasses override ``build_network``.

    Configuration recorded in the experiment folder's state orb (number of
    classes, dimensionality, deep supervision, ...) is picked up
    automatically; explicit attribute assignment afterwards still wins.
    """

    num_classes: int = 1
    num_dims: int = 2
    deep_supervision: bool = False
    padding_divisor: int = 16
    binary_threshold: float = 0.5

    def __init__(
        self,
        experiment_folder: str | Path,
        example_shape: tuple[int, ...],
        device: str | torch.device = "cpu",
    ) -> None:
        self.experiment_folder = Path(experiment_folder)
        self.example_shape = tuple(example_shape)
        self.device = torch.device(device)
        self.network: nn.Module | None = None
        self.padding: PadToMultiple | None = None
        self._apply_orb_config()

    def _apply_orb_config(self) -> None:
        orb_path = self.experiment_folder / "state.orb"
        if not orb_path.exists():
            return
        try:
            payload = torch.load(orb_path, weights_only=False)
            config = payload.get("train_args", {}).get("config", {})
        except Exception as err:
            logger.warning("could not read %s: %s", orb_path, err)
            return
        for key, value in config.items():
            if hasattr(type(self), key):
                setattr(self, key, value)

    def build_network(self, example_shape: tuple[int, ...]) -> nn.Module:
        raise NotImplementedError(
            f"{type(self).__name__} must override build_network() to supply a model"
        )

    def _checkpoint_state(self) -> dict:
        best = self.experiment_folder / "best.ckpt"
        latest = self.experiment_folder / "latest.ckpt"
        if best.exists():
            payload = torch.load(best, map_location=self.device, weights_only=False)
            return payload["model"]
        if latest.exists():
            payload = torch.load(latest, map_location=self.device, weights_only=False)
            state = payload.get("ema_model") or payload.get("model")
            if state is None:
                raise CheckpointError(f"{latest} holds no model weights")
            return state
        raise CheckpointError(
            f"no best.ckpt or latest.ckpt under {self.experiment_folder}"
        )

    def _ensure_loaded(self) -> nn.Module:
        if self.network is None:
            network = self.build_network(self.example_shape)
            network.load_state_dict(self._checkpoint_state())
            network.to(self.device)
            network.eval()
            for p in network.parameters():
                p.requires_grad_(False)
            self.network = network
            self.padding = PadToMultiple(self.padding_divisor)
        return self.network

    def predict(self, image: ImageVolume | torch.Tensor) -> torch.Tensor:
        """Predict an integer label map with the input's spatial shape."""
        network = self._ensure_loaded()
        data = image.data if isinstance(image, ImageVolume) else image
        if data.dim() != len(self.example_shape):
            raise ValueError(
                f"expected a {len(self.example_shape)}-D channel-first input, "
                f"got shape {tuple(data.shape)}"
            )
        if data.shape[0] != self.example_shape[0]:
            raise ValueError(
                f"expected {self.example_shape[0]} channels, got {data.shape[0]}"
            )
        batch = data.unsqueeze(0).to(self.device).float()
        assert self.padding is not None
        with torch.no_grad():
            padded = self.padding(batch)
            outputs = network(padded)
            primary = outputs[0] if isinstance(outputs, (list, tuple)) else outputs
            logits = self.padding.crop(primary)
            labels = classify_logits(logits, self.num_classes, self.binary_threshold)
        return labels.squeeze(0).cpu()

    def predict_to_file(self, source, out_dir: str | Path) -> list[Path]:
        """Predict every entry of ``source`` and export label files.

        2D predictions become .png files with class indices scaled to visible
        gray levels; 3D predictions become .mha files preserving the input's
        geometry metadata.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written: list[Path] = []
        for case_id, item in parse_predictant(source):
            prediction = self.predict(item)
            if prediction.dim() == 2:
                step = 255 // max(self.num_classes - 1, 1)
                gray = (prediction * step).clamp(0, 255).to(torch.uint8)
                target = out_dir / f"{case_id}.png"
                save_image(gray.unsqueeze(0), target)
            else:
                volume = ImageVolume(data=prediction.unsqueeze(0).to(torch.uint8))
                if isinstance(item, ImageVolume):
                    volume.spacing = item.spacing
                    volume.origin = item.origin
                    volume.direction = item.direction
                target = out_dir / f"{case_id}.mha"
                save_image(volume, target)
            written.append(target)
        return written
