"""Deferred layer configuration and layer-level building blocks.

A :class:`LayerSpec` stores a module type together with constructor keyword
arguments and instantiates the module only when ``assemble()`` is called.
Stored string values can act as deferred parameters ("in_ch", "out_ch") that
are resolved from the assemble-time keyword arguments, so a single spec adapts
to different channel counts without subclassing.
"""

from __future__ import annotations

import math
from typing import Any

import torch
import torch.nn.functional as F
from torch import nn

#: String values recognized as deferred parameters even when the caller does
#: not supply them (in which case assembly fails loudly instead of silently
#: forwarding the placeholder string to the constructor).
DEFERRED_TOKENS = ("in_ch", "out_ch")


class LayerConfigError(Exception):
    """A layer spec could not be assembled as configured."""


class LayerSpec:
    """A constructible module type plus stored constructor kwargs.

    The spec is an immutable value object: assembling never mutates it, and
    the same spec can be assembled any number of times with different
    arguments.

    Example::

        norm = LayerSpec(nn.BatchNorm2d, num_features="in_ch")
        norm.assemble(in_ch=128)   # nn.BatchNorm2d(128)
    """

    __slots__ = ("_module_type", "_stored_kwargs")

    def __init__(self, module_type: type, **stored_kwargs: Any) -> None:
        if not callable(module_type):
            raise LayerConfigError(f"module type {module_type!r} is not constructible")
        self._module_type = module_type
        self._stored_kwargs = dict(stored_kwargs)

    @property
    def module_type(self) -> type:
        return self._module_type

    @property
    def stored_kwargs(self) -> dict[str, Any]:
        return dict(self._stored_kwargs)

    def __repr__(self) -> str:
        kwargs = ", ".join(f"{k}={v!r}" for k, v in self._stored_kwargs.items())
        return f"LayerSpec({self._module_type.__name__}{', ' if kwargs else ''}{kwargs})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LayerSpec):
            return NotImplemented
        return (
            self._module_type is other._module_type
            and self._stored_kwargs == other._stored_kwargs
        )

    def consumes(self, name: str) -> bool:
        """True when some stored value defers to the call-time kwarg ``name``."""
        return any(value == name for value in self._stored_kwargs.values() if isinstance(value, str))

    def assemble(self, *args: Any, **call_kwargs: Any) -> Any:
        """Instantiate the stored module type.

        Positional arguments are forwarded verbatim. Stored kwargs whose value
        is a deferred token are replaced by the call-time value of that name
        (the token-source kwarg itself is not forwarded twice); remaining
        call kwargs override stored kwargs on name collision.
        """
        merged = dict(self._stored_kwargs)
        consumed: set[str] = set()
        for name, value in self._stored_kwargs.items():
            if not isinstance(value, str):
                continue
            if value in call_kwargs:
                merged[name] = call_kwargs[value]
                consumed.add(value)
            elif value in DEFERRED_TOKENS:
                raise LayerConfigError(
                    f"deferred parameter {value!r} (stored as {name!r} for "
                    f"{self._module_type.__name__}) was not supplied at assembly"
                )
        for name, value in call_kwargs.items():
            if name in consumed:
                continue
            merged[name] = value
        try:
            return self._module_type(*args, **merged)
        except Exception as err:
            raise LayerConfigError(
                f"constructing {self._module_type.__name__} with args={args} "
                f"kwargs={merged} failed: {err}"
            ) from err


def _default_specs_2d() -> tuple[LayerSpec, LayerSpec, LayerSpec]:
    return (
        LayerSpec(nn.Conv2d),
        LayerSpec(nn.BatchNorm2d, num_features="in_ch"),
        LayerSpec(nn.ReLU, inplace=True),
    )


def _default_specs_3d() -> tuple[LayerSpec, LayerSpec, LayerSpec]:
    return (
        LayerSpec(nn.Conv3d),
        LayerSpec(nn.BatchNorm3d, num_features="in_ch"),
        LayerSpec(nn.ReLU, inplace=True),
    )


def _norm_channels(module: nn.Module) -> int | None:
    for attr in ("num_features", "num_channels", "normalized_shape"):
        value = getattr(module, attr, None)
        if isinstance(value, int):
            return value
        if isinstance(value, (tuple, list)) and value and isinstance(value[0], int):
            return value[0]
    return None


class _ConvBlock(nn.Sequential):
    """conv -> norm -> act, each slot assembled from a :class:`LayerSpec`.

    The norm spec receives the convolution's output channel count through the
    deferred parameter ``in_ch`` (the channel count entering the norm).
    """

    _defaults = staticmethod(_default_specs_2d)

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        *,
        conv: LayerSpec | None = None,
        norm: LayerSpec | None = None,
        act: LayerSpec | None = None,
        **conv_kwargs: Any,
    ) -> None:
        if in_channels < 1 or out_channels < 1:
            raise LayerConfigError(
                f"channel counts must be >= 1, got in={in_channels} out={out_channels}"
            )
        default_conv, default_norm, default_act = self._defaults()
        conv = conv or default_conv
        norm = norm or default_norm
        act = act or default_act
        conv_module = conv.assemble(in_channels, out_channels, kernel_size, **conv_kwargs)
        norm_module = (
            norm.assemble(in_ch=out_channels) if norm.consumes("in_ch") else norm.assemble()
        )
        expected = _norm_channels(norm_module)
        if expected is not None and expected != out_channels:
            raise LayerConfigError(
                f"norm expects {expected} channels but the convolution "
                f"produces {out_channels}"
            )
        act_module = act.assemble()
        super().__init__(conv_module, norm_module, act_module)


class ConvBlock2d(_ConvBlock):
    """2D convolution block; defaults to Conv2d + BatchNorm2d + ReLU."""

    _defaults = staticmethod(_default_specs_2d)


class ConvBlock3d(_ConvBlock):
    """3D convolution block; defaults to Conv3d + BatchNorm3d + ReLU."""

    _defaults = staticmethod(_default_specs_3d)


class PadToMultiple(nn.Module):
    """Zero-pads spatial axes up to the next multiple of ``divisor``.

    Padding is split symmetrically with the extra voxel trailing. The inverse
    ``crop()`` restores the exact original spatial shape; ``scale`` supports
    cropping outputs at reduced resolutions (deep supervision heads).
    """

    def __init__(self, divisor: int = 16) -> None:
        super().__init__()
        if divisor < 1:
            raise ValueError(f"divisor must be >= 1, got {divisor}")
        self.divisor = divisor
        self._original: tuple[int, ...] | None = None
        self._leads: tuple[int, ...] | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spatial = x.shape[2:] if x.dim() > 2 else x.shape[1:]
        leads: list[int] = []
        pads: list[int] = []
        for n in spatial:
            target = math.ceil(n / self.divisor) * self.divisor
            total = target - n
            lead = total // 2
            leads.append(lead)
            pads.append(lead)
            pads.append(total - lead)
        self._original = tuple(spatial)
        self._leads = tuple(leads)
        if not any(pads):
            return x
        # F.pad wants (lead, trail) pairs starting with the last axis
        flat: list[int] = []
        for lead, trail in zip(pads[0::2][::-1], pads[1::2][::-1]):
            flat.extend((lead, trail))
        return F.pad(x, flat)

    def crop(self, y: torch.Tensor, scale: int = 1) -> torch.Tensor:
        if self._original is None or self._leads is None:
            raise RuntimeError("crop() called before any forward pass")
        n_spatial = len(self._original)
        slices: list[slice] = [slice(None)] * (y.dim() - n_spatial)
        for n, lead, avail in zip(self._original, self._leads, y.shape[-n_spatial:]):
            start = min(lead // scale, max(avail - math.ceil(n / scale), 0))
            slices.append(slice(start, start + math.ceil(n / scale)))
        return y[tuple(slices)]
