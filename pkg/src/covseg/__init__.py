"""CT slice segmentation with a from-scratch U-Net, slice-to-scan triage and metric arithmetic."""

from ._kernels import BACKEND
from .data import AnnotationRegion, SliceRecord, stratified_split
from .inference import aggregate_scan, classify_slice
from .metrics import ConfusionMatrix
from .tensor import Tensor
from .unet import UNet, UNetConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AnnotationRegion",
    "ConfusionMatrix",
    "SliceRecord",
    "Tensor",
    "UNet",
    "UNetConfig",
    "aggregate_scan",
    "classify_slice",
    "stratified_split",
]
