"""Prompt-based grouping transformer for nucleus centroid detection.

A small numpy autodiff engine drives a windowed-attention backbone that
accepts learnable grouping prompts, a deformable-attention centroid
detector, and a classifier that hard-groups queries through those same
prompts.  Training runs in two phases (full pretune, then prompt tuning on a
frozen backbone) on synthetic clustered scenes.
"""
from .config import OptimConfig, RunConfig, load_config
from .data import NucleusInstance, SceneConfig, generate_dataset, load_dataset, save_dataset
from .errors import (CheckpointError, DatasetError, DivergenceError, GenerationError,
                     GroupPromptError, NumericError, ParameterError, ShapeError, StatisticsError)
from .matching import hungarian
from .metrics import EvalReport, evaluate, f_scores, match_detections, welch_t_test
from .model import ModelConfig, NucleusDetector
from .tensor import Tensor, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "OptimConfig", "RunConfig", "load_config",
    "NucleusInstance", "SceneConfig", "generate_dataset", "load_dataset", "save_dataset",
    "CheckpointError", "DatasetError", "DivergenceError", "GenerationError", "GroupPromptError",
    "NumericError", "ParameterError", "ShapeError", "StatisticsError",
    "hungarian", "EvalReport", "evaluate", "f_scores", "match_detections", "welch_t_test",
    "ModelConfig", "NucleusDetector", "Tensor", "grad_check", "no_grad",
]
