"""Model bundles: self-contained architecture + trainer + predictor triples."""

from dataclasses import dataclass

from .unet import UNet, UNetPredictor, UNetTrainer, make_unet2d, make_unet3d


@dataclass(frozen=True)
class BundleEntry:
    trainer_cls: type
    predictor_cls: type


BUNDLES: dict[str, BundleEntry] = {
    "unet": BundleEntry(UNetTrainer, UNetPredictor),
}


def get_bundle(name: str) -> BundleEntry:
    try:
        return BUNDLES[name]
    except KeyError:
        available = ", ".join(sorted(BUNDLES))
        raise KeyError(f"unknown bundle {name!r}; available bundles: {available}") from None


__all__ = [
    "BUNDLES",
    "BundleEntry",
    "UNet",
    "UNetPredictor",
    "UNetTrainer",
    "get_bundle",
    "make_unet2d",
    "make_unet3d",
]
