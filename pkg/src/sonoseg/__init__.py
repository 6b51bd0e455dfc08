"""FPN + spatial-RNN multi-organ segmentation at desk scale."""

from .data import DEFAULT_PALETTE, DiceReport, decode_mask, dice_pair, mean_dice
from .fpn import FeaturePyramid, extract
from .segmenter import OrganSegmenter
from .srnn import SrnnConfig, scan, srnn_module
from .tensor import ConvWeights, Tensor4, grad_check

__version__ = "0.1.0"

__all__ = [
    "ConvWeights", "DEFAULT_PALETTE", "DiceReport", "FeaturePyramid",
    "OrganSegmenter", "SrnnConfig", "Tensor4", "decode_mask", "dice_pair",
    "extract", "grad_check", "mean_dice", "scan", "srnn_module",
]
