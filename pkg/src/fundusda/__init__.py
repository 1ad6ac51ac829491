"""Unsupervised domain adaptation for joint optic disc / optic cup segmentation."""

__version__ = "0.1.0"

from .config import ExperimentConfig, LossWeights, load_config
from .rng import RngHandle, seed_all

__all__ = [
    "ExperimentConfig",
    "LossWeights",
    "load_config",
    "RngHandle",
    "seed_all",
    "__version__",
]
