"""Write a synthetic nnU-Net-format dataset of blob images for demos and CLI runs.

Usage:
    python scripts/make_synthetic_dataset.py out/Dataset900_BLOBS --cases 20 --size 64
"""

from __future__ import annotations

import argparse
from pathlib import Path

import torch

from medsegkit import ImageVolume, save_image


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--cases", type=int, default=20)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--split", default="Tr")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    g = torch.Generator().manual_seed(args.seed)
    size = args.size
    ys, xs = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    images_dir = args.out_dir / f"images{args.split}"
    labels_dir = args.out_dir / f"labels{args.split}"
    images_dir.mkdir(parents=True, exist_ok=True)
    labels_dir.mkdir(parents=True, exist_ok=True)

    margin = max(size // 4, 2)
    for case in range(args.cases):
        cy, cx = torch.randint(margin, size - margin, (2,), generator=g)
        radius = int(torch.randint(max(size // 10, 2), max(size // 5, 3) + 1, (1,), generator=g))
        blob = torch.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * (radius / 2.0) ** 2)))
        noise = 0.1 * torch.randn(size, size, generator=g)
        image = (0.2 + 0.8 * blob + noise).clamp(0, 1).unsqueeze(0).float()
        label = ((ys - cy) ** 2 + (xs - cx) ** 2 <= radius * radius).long().unsqueeze(0)

        case_id = f"blob_{case:04d}"
        save_image(ImageVolume(data=image), images_dir / f"{case_id}_0000.png")
        save_image(ImageVolume(data=label), labels_dir / f"{case_id}.png")

    print(f"wrote {args.cases} cases under {args.out_dir}")


if __name__ == "__main__":
    main()
