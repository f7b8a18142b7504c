"""Reference U-Net bundle: model, builder functions, trainer, and predictor.

Encoder/decoder with two conv blocks per level, strided-convolution
downsampling, transposed-convolution upsampling, and skip concatenation.
Convolution, normalization, and activation layers are all assembled from
:class:`~medsegkit.layers.LayerSpec` descriptors, so they can be swapped at
construction time without subclassing. With deep supervision enabled the
forward pass returns depth-1 outputs ordered full-resolution first, at
spatial scales 2^-i.
"""

from __future__ import annotations

import torch
from torch import nn

from ..inference import Predictor
from ..layers import ConvBlock2d, ConvBlock3d, LayerSpec
from ..presets import SegmentationTrainer

_DIM_LAYERS = {
    2: (ConvBlock2d, nn.Conv2d, nn.ConvTranspose2d),
    3: (ConvBlock3d, nn.Conv3d, nn.ConvTranspose3d),
}


class UNet(nn.Module):
    """Configurable 2D/3D U-Net with optional deep-supervision heads."""

    def __init__(
        self,
        dims: int,
        in_channels: int,
        num_classes: int,
        depth: int = 5,
        base_channels: int = 32,
        deep_supervision: bool = False,
        norm: LayerSpec | None = None,
        act: LayerSpec | None = None,
    ) -> None:
        super().__init__()
        if dims not in _DIM_LAYERS:
            raise ValueError(f"dims must be 2 or 3, got {dims}")
        if depth < 2:
            raise ValueError(f"depth must be >= 2, got {depth}")
        if min(in_channels, num_classes, base_channels) < 1:
            raise ValueError("in_channels, num_classes, and base_channels must be positive")
        block, conv, conv_transpose = _DIM_LAYERS[dims]
        self.dims = dims
        self.depth = depth
        self.num_classes = num_classes
        self.deep_supervision = deep_supervision
        widths = [base_channels * 2**i for i in range(depth)]

        def stage(cin: int, cout: int) -> nn.Sequential:
            return nn.Sequential(
                block(cin, cout, 3, padding=1, norm=norm, act=act),
                block(cout, cout, 3, padding=1, norm=norm, act=act),
            )

        self.encoders = nn.ModuleList(
            [stage(in_channels if i == 0 else widths[i], widths[i]) for i in range(depth)]
        )
        self.downsamplers = nn.ModuleList(
            [conv(widths[i], widths[i + 1], kernel_size=2, stride=2) for i in range(depth - 1)]
        )
        self.upsamplers = nn.ModuleList(
            [
                conv_transpose(widths[i + 1], widths[i], kernel_size=2, stride=2)
                for i in reversed(range(depth - 1))
            ]
        )
        self.decoders = nn.ModuleList(
            [stage(2 * widths[i], widths[i]) for i in reversed(range(depth - 1))]
        )
        head_levels = range(depth - 1) if deep_supervision else [0]
        self.heads = nn.ModuleDict(
            {str(i): conv(widths[i], num_classes, kernel_size=1) for i in head_levels}
        )

    @property
    def num_outputs(self) -> int:
        return self.depth - 1 if self.deep_supervision else 1

    def forward(self, x: torch.Tensor) -> torch.Tensor | list[torch.Tensor]:
        skips: list[torch.Tensor] = []
        for level, encoder in enumerate(self.encoders):
            x = encoder(x)
            if level < self.depth - 1:
                skips.append(x)
                x = self.downsamplers[level](x)
        features: dict[int, torch.Tensor] = {}
        for step, (upsample, decoder) in enumerate(zip(self.upsamplers, self.decoders)):
            level = self.depth - 2 - step
            x = upsample(x)
            x = decoder(torch.cat([skips[level], x], dim=1))
            features[level] = x
        if self.deep_supervision:
            return [self.heads[str(i)](features[i]) for i in range(self.depth - 1)]
        return self.heads["0"](features[0])


def make_unet2d(
    in_channels: int,
    num_classes: int,
    depth: int = 5,
    base_channels: int = 32,
    deep_supervision: bool = False,
    norm: LayerSpec | None = None,
    act: LayerSpec | None = None,
) -> UNet:
    return UNet(
        2, in_channels, num_classes, depth, base_channels, deep_supervision, norm, act
    )


def make_unet3d(
    in_channels: int,
    num_classes: int,
    depth: int = 5,
    base_channels: int = 32,
    deep_supervision: bool = False,
    norm: LayerSpec | None = None,
    act: LayerSpec | None = None,
) -> UNet:
    return UNet(
        3, in_channels, num_classes, depth, base_channels, deep_supervision, norm, act
    )


def _build_from_flags(
    example_shape: tuple[int, ...],
    num_dims: int,
    num_classes: int,
    depth: int,
    base_channels: int,
    deep_supervision: bool,
) -> UNet:
    maker = make_unet2d if num_dims == 2 else make_unet3d
    return maker(
        example_shape[0],
        num_classes,
        depth=depth,
        base_channels=base_channels,
        deep_supervision=deep_supervision,
    )


class UNetTrainer(SegmentationTrainer):
    """Segmentation preset backed by the U-Net above; nothing else overridden."""

    unet_depth: int = 5
    unet_base_channels: int = 32

    def build_network(self, example_shape: tuple[int, ...]) -> UNet:
        return _build_from_flags(
            example_shape,
            self.num_dims,
            self.num_classes,
            self.unet_depth,
            self.unet_base_channels,
            self.deep_supervision,
        )

    def config_snapshot(self) -> dict:
        config = super().config_snapshot()
        config.update(unet_depth=self.unet_depth, unet_base_channels=self.unet_base_channels)
        return config


class UNetPredictor(Predictor):
    """Predictor counterpart of :class:`UNetTrainer` with the same network config."""

    unet_depth: int = 5
    unet_base_channels: int = 32

    def build_network(self, example_shape: tuple[int, ...]) -> UNet:
        return _build_from_flags(
            example_shape,
            self.num_dims,
            self.num_classes,
            self.unet_depth,
            self.unet_base_channels,
            self.deep_supervision,
        )
