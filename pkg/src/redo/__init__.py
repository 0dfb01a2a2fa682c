"""Unsupervised object segmentation by adversarially redrawing image regions."""

from .composition import (
    SceneConfig,
    complete_background_mask,
    compose,
    redraw_one,
    validate_mask_set,
)
from .networks import NetworkConfig, build_models
from .objectives import LossWeights, lambda_z_value
from .training import RestartPolicy, TrainConfig, Trainer, train

__version__ = "0.1.0"

__all__ = [
    "SceneConfig", "NetworkConfig", "LossWeights", "TrainConfig", "RestartPolicy",
    "Trainer", "train", "compose", "redraw_one", "complete_background_mask",
    "validate_mask_set", "lambda_z_value", "build_models", "__version__",
]
