from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch

from medsegkit import ArrayDataset, ImageVolume, save_image


@pytest.hookimpl(tryfirst=True, hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    setattr(item, "rep_" + report.when, report)


def make_blob_dataset(n: int = 40, size: int = 64, seed: int = 0) -> ArrayDataset:
    """Gaussian-blob foreground on a noisy background; labels are disk masks."""
    g = torch.Generator().manual_seed(seed)
    ys, xs = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    margin = max(size // 4, 2)
    r_lo, r_hi = max(size // 10, 2), max(size // 5, 3)
    images, labels = [], []
    for _ in range(n):
        cy, cx = torch.randint(margin, size - margin, (2,), generator=g)
        radius = int(torch.randint(r_lo, r_hi + 1, (1,), generator=g))
        blob = torch.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * (radius / 2.0) ** 2)))
        noise = 0.1 * torch.randn(size, size, generator=g)
        images.append((0.2 + 0.8 * blob + noise).clamp(0, 1).unsqueeze(0).float())
        labels.append((((ys - cy) ** 2 + (xs - cx) ** 2) <= radius * radius).long())
    return ArrayDataset(images, labels)


def make_box_dataset(
    n: int = 20, size: int = 48, seed: int = 0
) -> tuple[ArrayDataset, list[tuple[tuple[int, int], ...]]]:
    """Volumes with one solid planted box each; returns the ground-truth boxes."""
    rng = np.random.default_rng(seed)
    images, labels, boxes = [], [], []
    for _ in range(n):
        label = torch.zeros(size, size, dtype=torch.long)
        spans = []
        for _axis in range(2):
            extent = int(rng.integers(8, size // 2))
            lo = int(rng.integers(0, size - extent))
            spans.append((lo, lo + extent))
        label[spans[0][0] : spans[0][1], spans[1][0] : spans[1][1]] = 1
        image = 0.2 + 0.6 * label.float() + 0.05 * torch.from_numpy(
            rng.standard_normal((size, size))
        ).float()
        images.append(image.unsqueeze(0))
        labels.append(label)
        boxes.append(tuple(spans))
    return ArrayDataset(images, labels), boxes


def write_nnunet_folder(
    root: Path,
    n_cases: int = 3,
    modalities: int = 2,
    size: int = 32,
    split: str = "Tr",
    num_classes: int = 2,
    ext: str = ".nii.gz",
    seed: int = 0,
) -> Path:
    """Materialize a synthetic nnU-Net raw-format dataset on disk."""
    rng = np.random.default_rng(seed)
    images_dir = root / f"images{split}"
    labels_dir = root / f"labels{split}"
    images_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)
    for case in range(n_cases):
        case_id = f"case_{case:04d}"
        label = np.zeros((size, size), dtype=np.int64)
        lo = 4 + case
        hi = min(size - 4, lo + size // 3)
        label[lo:hi, lo:hi] = int(rng.integers(1, num_classes))
        for modality in range(modalities):
            image = (0.2 * modality + 0.5 * label + 0.1 * rng.standard_normal((size, size))).astype(
                np.float32
            )
            vol = ImageVolume(data=torch.from_numpy(image).unsqueeze(0))
            save_image(vol, images_dir / f"{case_id}_{modality:04d}{ext}")
        save_image(
            ImageVolume(data=torch.from_numpy(label).unsqueeze(0)),
            labels_dir / f"{case_id}{ext}",
        )
    return root


@pytest.fixture
def blob_dataset() -> ArrayDataset:
    return make_blob_dataset(n=20, size=32, seed=1)


@pytest.fixture
def nnunet_folder(tmp_path: Path) -> Path:
    return write_nnunet_folder(tmp_path / "Dataset501_SYN")
