"""Intra-expert activation sparsity for a single Mixture-of-Experts layer."""
from .kernels import BACKEND_NAME
from .model import ConfigError, MoEConfig, MoELayerWeights, generate_synthetic, load_weights, save_weights

__all__ = [
    "BACKEND_NAME",
    "ConfigError",
    "MoEConfig",
    "MoELayerWeights",
    "generate_synthetic",
    "load_weights",
    "save_weights",
]
__version__ = "0.1.0"
