"""Supervised dataset abstractions: base class, nnU-Net raw loader, wrappers.

Every dataset yields ``(image, label)`` pairs with matching spatial shapes,
knows its case ids, places fetched tensors on a target device, and supports
deterministic k-fold splitting via :meth:`SupervisedDataset.fold`.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from .io import SUPPORTED_EXTENSIONS, load_image, strip_image_suffix


class DatasetError(Exception):
    """A dataset folder or item is inconsistent with its contract."""


class SupervisedDataset(Dataset):
    """Ordered collection of (image, label) pairs with device placement."""

    def __init__(self, device: str | torch.device = "cpu") -> None:
        self.device = torch.device(device)

    def __len__(self) -> int:
        raise NotImplementedError

    def fetch(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw item access without device placement."""
        raise NotImplementedError

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        image, label = self.fetch(index)
        return image.to(self.device), label.to(self.device)

    def case_id(self, index: int) -> str:
        return f"case_{index:04d}"

    @property
    def case_ids(self) -> list[str]:
        return [self.case_id(i) for i in range(len(self))]

    def to(self, device: str | torch.device) -> "SupervisedDataset":
        self.device = torch.device(device)
        return self

    def fold(
        self, fold: int = 0, k: int = 5, seed: int = 0
    ) -> tuple["SupervisedDataset", "SupervisedDataset"]:
        """Deterministic k-fold split into (train, validation) views.

        Indices are shuffled with the seed, split into k chunks whose sizes
        differ by at most one; the fold-th chunk is validation.
        """
        n = len(self)
        if k < 2:
            raise ValueError(f"k must be >= 2, got {k}")
        if not 0 <= fold < k:
            raise ValueError(f"fold must lie in [0, {k}), got {fold}")
        if n < k:
            raise DatasetError(f"cannot split {n} items into {k} folds")
        perm = np.random.default_rng(seed).permutation(n)
        chunks = np.array_split(perm, k)
        val_indices = [int(i) for i in chunks[fold]]
        train_indices = [int(i) for j, chunk in enumerate(chunks) if j != fold for i in chunk]
        return SubsetView(self, train_indices), SubsetView(self, val_indices)


class SubsetView(SupervisedDataset):
    """A fixed-index view over another dataset."""

    def __init__(self, parent: SupervisedDataset, indices: Sequence[int]) -> None:
        super().__init__(parent.device)
        self.parent = parent
        self.indices = list(indices)

    def __len__(self) -> int:
        return len(self.indices)

    def fetch(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.parent.fetch(self.indices[index])

    def case_id(self, index: int) -> str:
        return self.parent.case_id(self.indices[index])


class ArrayDataset(SupervisedDataset):
    """In-memory dataset over parallel image and label sequences."""

    def __init__(
        self,
        images: Sequence[torch.Tensor],
        labels: Sequence[torch.Tensor],
        ids: Sequence[str] | None = None,
        device: str | torch.device = "cpu",
    ) -> None:
        super().__init__(device)
        if len(images) != len(labels):
            raise DatasetError(f"{len(images)} images vs {len(labels)} labels")
        self.images = list(images)
        self.labels = list(labels)
        self.ids = list(ids) if ids is not None else None
        if self.ids is not None and len(self.ids) != len(self.images):
            raise DatasetError("ids length does not match item count")

    def __len__(self) -> int:
        return len(self.images)

    def fetch(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.images[index], self.labels[index]

    def case_id(self, index: int) -> str:
        if self.ids is not None:
            return self.ids[index]
        return super().case_id(index)


_MODALITY_RE = re.compile(r"^(?P<case>.+)_(?P<modality>\d{4})$")


class NNUNetDataset(SupervisedDataset):
    """nnU-Net raw-format folder: images{split}/ + labels{split}/.

    Image files are named ``{case}_{MMMM}.{ext}`` with a 4-digit modality
    index; label files ``{case}.{ext}``. Modalities are stacked along the
    channel axis in ascending index order; items are ordered by case id.
    """

    def __init__(
        self,
        folder: str | Path,
        split: str = "Tr",
        device: str | torch.device = "cpu",
        resample_iso: float | None = None,
    ) -> None:
        super().__init__(device)
        self.folder = Path(folder)
        self.split = split
        self.resample_iso = resample_iso
        images_dir = self.folder / f"images{split}"
        labels_dir = self.folder / f"labels{split}"
        if not images_dir.is_dir() or not labels_dir.is_dir():
            raise DatasetError(
                f"expected {images_dir.name}/ and {labels_dir.name}/ under {self.folder}"
            )

        cases: dict[str, dict[int, Path]] = {}
        for path in sorted(images_dir.iterdir()):
            if not path.is_file() or not str(path).lower().endswith(SUPPORTED_EXTENSIONS):
                continue
            match = _MODALITY_RE.match(strip_image_suffix(path))
            if match is None:
                raise DatasetError(
                    f"image file {path.name} does not match the case_XXXX_MMMM naming scheme"
                )
            cases.setdefault(match["case"], {})[int(match["modality"])] = path
        if not cases:
            raise DatasetError(f"no image files found in {images_dir}")

        label_files = {
            strip_image_suffix(p): p
            for p in sorted(labels_dir.iterdir())
            if p.is_file() and str(p).lower().endswith(SUPPORTED_EXTENSIONS)
        }

        modality_counts = {case: len(mods) for case, mods in cases.items()}
        distinct = set(modality_counts.values())
        if len(distinct) > 1:
            raise DatasetError(f"inconsistent modality counts across cases: {modality_counts}")

        self._cases: list[tuple[str, list[Path], Path]] = []
        for case in sorted(cases):
            if case not in label_files:
                raise DatasetError(f"label file missing for case {case!r}")
            modalities = [cases[case][m] for m in sorted(cases[case])]
            self._cases.append((case, modalities, label_files[case]))

    def __len__(self) -> int:
        return len(self._cases)

    def case_id(self, index: int) -> str:
        return self._cases[index][0]

    def fetch(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        case, modality_paths, label_path = self._cases[index]
        channels = [
            load_image(p, resample_iso=self.resample_iso).data for p in modality_paths
        ]
        image = torch.cat(channels, dim=0)
        label_vol = load_image(label_path, resample_iso=self.resample_iso, is_label=True)
        if label_vol.num_channels != 1:
            raise DatasetError(f"label for case {case!r} has {label_vol.num_channels} channels")
        label = label_vol.data.squeeze(0).long()
        if tuple(image.shape[1:]) != tuple(label.shape):
            raise DatasetError(
                f"case {case!r}: image spatial shape {tuple(image.shape[1:])} "
                f"does not match label shape {tuple(label.shape)}"
            )
        return image, label


class BinarizedDataset(SupervisedDataset):
    """Multiclass-to-binary wrapper: label > 0 becomes 1, images untouched."""

    def __init__(self, source: SupervisedDataset) -> None:
        super().__init__(source.device)
        self.source = source

    def __len__(self) -> int:
        return len(self.source)

    def fetch(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        image, label = self.source.fetch(index)
        return image, (label > 0).long()

    def case_id(self, index: int) -> str:
        return self.source.case_id(index)


class MergedDataset(SupervisedDataset):
    """Concatenation of datasets with per-source id prefixes to avoid collisions."""

    def __init__(
        self,
        sources: Sequence[SupervisedDataset],
        prefixes: Sequence[str] | None = None,
    ) -> None:
        if not sources:
            raise DatasetError("cannot merge zero datasets")
        super().__init__(sources[0].device)
        self.sources = list(sources)
        self.prefixes = (
            list(prefixes) if prefixes is not None else [f"ds{i}" for i in range(len(sources))]
        )
        if len(self.prefixes) != len(self.sources):
            raise DatasetError("one prefix required per merged dataset")
        self._bounds: list[int] = []
        total = 0
        for src in self.sources:
            total += len(src)
            self._bounds.append(total)

    def __len__(self) -> int:
        return self._bounds[-1]

    def _locate(self, index: int) -> tuple[int, int]:
        if not 0 <= index < len(self):
            raise IndexError(index)
        previous = 0
        for which, bound in enumerate(self._bounds):
            if index < bound:
                return which, index - previous
            previous = bound
        raise IndexError(index)

    def fetch(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        which, local = self._locate(index)
        return self.sources[which].fetch(local)

    def case_id(self, index: int) -> str:
        which, local = self._locate(index)
        return f"{self.prefixes[which]}/{self.sources[which].case_id(local)}"
