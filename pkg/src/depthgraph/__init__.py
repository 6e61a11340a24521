"""Joint denoising and dequantization of stereo depth maps with graph priors.

The package models a depth camera as a log-domain quantizer plus
depth-dependent Gaussian noise, estimates that noise from clustered
observations, splits each view into constant-noise layers and restores each
row by maximizing a linearized likelihood with learned graph Laplacian
priors on both views.
"""

from .forward import (
    DEFAULT_NOISE,
    DEFAULT_QUANTIZER,
    DepthImage,
    NoiseFamily,
    NoiseModel,
    QuantizerParams,
    bin_edges,
    corrupt,
    dequantize,
    noise_std,
    quantization_mapping,
)
from .enhance import EnhanceResult, enhance_pair, enhance_view, prepare_view
from .metrics import PointCloud, c2c, c2p, normalize_cloud, project_to_cloud
from .solver import SolverConfig, enhance_row

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_NOISE",
    "DEFAULT_QUANTIZER",
    "DepthImage",
    "NoiseFamily",
    "NoiseModel",
    "QuantizerParams",
    "bin_edges",
    "corrupt",
    "dequantize",
    "noise_std",
    "quantization_mapping",
    "EnhanceResult",
    "enhance_pair",
    "enhance_view",
    "prepare_view",
    "PointCloud",
    "c2c",
    "c2p",
    "normalize_cloud",
    "project_to_cloud",
    "SolverConfig",
    "enhance_row",
]
