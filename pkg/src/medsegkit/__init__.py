"""medsegkit: modular training, inference, and evaluation for medical image segmentation.

A complete segmentation workflow needs one override (``build_network`` on
:class:`~medsegkit.presets.SegmentationTrainer`, or just use a bundle); every
component below is also independently usable.
"""

from .data import (
    ArrayDataset,
    BinarizedDataset,
    ImageVolume,
    InspectionReport,
    MergedDataset,
    NNUNetDataset,
    RandomROIDataset,
    SupervisedDataset,
    fast_load,
    fast_save,
    inspect,
    load_image,
    save_image,
)
from .evaluation import EvalResult, Evaluator
from .frontend import (
    FileFrontend,
    Frontend,
    HttpFrontend,
    HybridFrontend,
    NullFrontend,
    create_hybrid_frontend,
)
from .inference import Predictor, parse_predictant
from .layers import ConvBlock2d, ConvBlock3d, LayerConfigError, LayerSpec, PadToMultiple
from .losses import DeepSupervisionLoss, DiceCELoss, classify_logits, deep_supervision_weights
from .metrics import binary_dice, dice_similarity_coefficient, soft_dice
from .numerics import (
    PolyLRScheduler,
    QuotientModel,
    ScorePrediction,
    fit_quotient,
    poly_lr,
    predict_plateau,
)
from .presets import (
    SegmentationConfig,
    SegmentationTrainer,
    backward_with_clip,
    default_criterion,
    default_optimizer,
)
from .training import (
    EMAModel,
    RecoveryError,
    SanityCheckError,
    StateOrb,
    Trainer,
    TrainerToolbox,
    ema_update,
)

__version__ = "0.1.0"

__all__ = [
    "ArrayDataset",
    "BinarizedDataset",
    "ConvBlock2d",
    "ConvBlock3d",
    "DeepSupervisionLoss",
    "DiceCELoss",
    "EMAModel",
    "EvalResult",
    "Evaluator",
    "FileFrontend",
    "Frontend",
    "HttpFrontend",
    "HybridFrontend",
    "ImageVolume",
    "InspectionReport",
    "LayerConfigError",
    "LayerSpec",
    "MergedDataset",
    "NNUNetDataset",
    "NullFrontend",
    "PadToMultiple",
    "PolyLRScheduler",
    "Predictor",
    "QuotientModel",
    "RandomROIDataset",
    "RecoveryError",
    "SanityCheckError",
    "ScorePrediction",
    "SegmentationConfig",
    "SegmentationTrainer",
    "StateOrb",
    "SupervisedDataset",
    "Trainer",
    "TrainerToolbox",
    "backward_with_clip",
    "binary_dice",
    "classify_logits",
    "create_hybrid_frontend",
    "deep_supervision_weights",
    "default_criterion",
    "default_optimizer",
    "dice_similarity_coefficient",
    "ema_update",
    "fast_load",
    "fast_save",
    "fit_quotient",
    "inspect",
    "load_image",
    "parse_predictant",
    "poly_lr",
    "predict_plateau",
    "save_image",
    "soft_dice",
]
