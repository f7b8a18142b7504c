"""End-to-end demo: train a small U-Net on synthetic blobs, then predict and evaluate.

Usage:
    python scripts/train_synthetic.py --epochs 20 --out experiments
"""

from __future__ import annotations

import argparse
from pathlib import Path

import torch
from torch.utils.data import DataLoader

from medsegkit import ArrayDataset, Evaluator, binary_dice
from medsegkit.bundles import UNetPredictor, UNetTrainer


def blob_dataset(n: int = 40, size: int = 64, seed: int = 0) -> ArrayDataset:
    g = torch.Generator().manual_seed(seed)
    ys, xs = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    images, labels = [], []
    for _ in range(n):
        cy, cx = torch.randint(size // 4, size - size // 4, (2,), generator=g)
        radius = int(torch.randint(size // 10, size // 5 + 1, (1,), generator=g))
        blob = torch.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * (radius / 2.0) ** 2)))
        noise = 0.1 * torch.randn(size, size, generator=g)
        images.append((0.2 + 0.8 * blob + noise).clamp(0, 1).unsqueeze(0).float())
        labels.append((((ys - cy) ** 2 + (xs - cx) ** 2) <= radius * radius).long())
    return ArrayDataset(images, labels)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--out", type=Path, default=Path("experiments"))
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--ema", action="store_true")
    args = parser.parse_args()

    torch.manual_seed(args.seed)
    dataset = blob_dataset(seed=args.seed)
    train, val = dataset.fold(fold=0, k=5, seed=args.seed)

    trainer = UNetTrainer(
        args.out,
        DataLoader(train, batch_size=4, shuffle=True),
        DataLoader(val, batch_size=1),
        device=args.device,
    )
    trainer.num_classes = 1
    trainer.unet_depth = 3
    trainer.unet_base_channels = 8
    trainer.ema = args.ema
    trainer.train(args.epochs)

    predictor = UNetPredictor(
        trainer.experiment_folder, example_shape=(1, 64, 64), device=args.device
    )
    labels = {val.case_id(i): val.fetch(i)[1] for i in range(len(val))}
    images = {val.case_id(i): val.fetch(i)[0] for i in range(len(val))}
    result = Evaluator(binary_dice).predict_and_evaluate(images, labels, predictor)
    print(result.to_json())
    print(f"experiment folder: {trainer.experiment_folder}")


if __name__ == "__main__":
    main()
