"""Evidential segmentation with uncertainty-guided attention, on a small numpy autodiff core."""

from .evidential import EvidenceField, evi_generate, predict_mask, to_field
from .losses import GroundTruth, LossConfig, loss_total
from .network import Net, NetConfig, load_checkpoint, save_checkpoint
from .progressive import ProgressiveConfig, progressive_segment
from .tensor import ContractError, DimensionError, NumericError, Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "ContractError", "DimensionError", "EvidenceField", "GroundTruth", "LossConfig", "Net",
    "NetConfig", "NumericError", "ProgressiveConfig", "Tape", "Tensor", "evi_generate",
    "load_checkpoint", "loss_total", "predict_mask", "progressive_segment", "save_checkpoint",
    "to_field",
]
