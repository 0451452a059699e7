"""Progressively grown GAN for binary image segmentation, on a numpy autodiff core."""

from .compare import compare_models
from .config import Config, parse_config
from .data import Dataset, SceneSpec, generate_scene, split, synthetic_dataset
from .errors import (CheckpointError, ConfigError, ContractError, DataError, FormatError,
                     ProgsegError, ShapeError)
from .estimator import ProgressiveSegmenter
from .metrics import ComparisonReport, Metrics, evaluate_model, per_pixel_metrics
from .progan import Architecture, Discriminator, Generator, GrowthState, grow, infer_mask
from .tensor import Rng, Tensor, backward, grad_check, no_grad
from .train import ObjectiveConfig, Schedule, TrainConfig, TrainRecord, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "Architecture", "CheckpointError", "ComparisonReport", "Config", "ConfigError",
    "ContractError", "DataError", "Dataset", "Discriminator", "FormatError", "Generator",
    "GrowthState", "Metrics", "ObjectiveConfig", "ProgressiveSegmenter", "ProgsegError", "Rng",
    "SceneSpec", "Schedule", "ShapeError", "Tensor", "TrainConfig", "TrainRecord", "backward",
    "compare_models", "evaluate_model", "fit", "generate_scene", "grad_check", "grow",
    "infer_mask", "no_grad", "parse_config", "per_pixel_metrics", "split", "synthetic_dataset",
    "train_step",
]
