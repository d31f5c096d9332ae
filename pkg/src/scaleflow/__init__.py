"""Dense correspondence across scales.

Detector scales are propagated into per-pixel scale maps, scale-adapted
SIFT descriptors are extracted densely, and a truncated-L1 flow energy is
minimised coarse to fine.
"""

from .descriptor import DenseDescriptorField, extract_at, extract_dense_constant, extract_dense_mapped
from .detector import Keypoint, detect, detect_image
from .evaluation import ErrorStats, angular_error, endpoint_error, noise_study, runtime_report, scaled_benchmark
from .flow import FlowField, FlowParams, estimate_flow
from .flowio import read_flo, write_flo
from .image import load_image, resize, to_grayscale, warp_backward
from .propagation import ScaleMap, propagate, propagate_matched

__version__ = "0.1.0"

__all__ = [
    "DenseDescriptorField", "extract_at", "extract_dense_constant", "extract_dense_mapped",
    "Keypoint", "detect", "detect_image",
    "ErrorStats", "angular_error", "endpoint_error", "noise_study", "runtime_report",
    "scaled_benchmark",
    "FlowField", "FlowParams", "estimate_flow",
    "read_flo", "write_flo",
    "load_image", "resize", "to_grayscale", "warp_backward",
    "ScaleMap", "propagate", "propagate_matched",
]
