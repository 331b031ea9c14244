"""Intervertebral disc labeling as heatmap pose estimation.

A stacked hourglass network with a multi-level attention gate predicts
per-disc heatmaps; peak candidates are then matched against a normalized
skeleton prior by combinatorial search, and results are scored with
distance / FPR / FNR metrics at a millimeter tolerance.
"""

__version__ = "0.1.0"

from .autodiff import Tensor
from .candidates import Candidate, CandidateSet, PeakParams, extract_all, local_maxima
from .metrics import EvalReport, aggregate, match_and_score
from .model import ForwardOutput, Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .skeleton import (
    Assignment,
    LabelingResult,
    Skeleton,
    brute_force_best,
    build_skeleton,
    normalize_points,
    search_best,
    skeleton_error,
)
from .synth import SynthConfig, generate_case, generate_dataset
from .targets import (
    HeatmapStack,
    LabeledCase,
    average_slices,
    load_case,
    make_target,
    normalize01,
    save_case,
)
from .training import AdamState, TrainConfig, adam_step, masked_mse, total_loss, train

__all__ = [
    "Tensor",
    "Candidate",
    "CandidateSet",
    "PeakParams",
    "extract_all",
    "local_maxima",
    "EvalReport",
    "aggregate",
    "match_and_score",
    "ForwardOutput",
    "Model",
    "ModelConfig",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "Assignment",
    "LabelingResult",
    "Skeleton",
    "brute_force_best",
    "build_skeleton",
    "normalize_points",
    "search_best",
    "skeleton_error",
    "SynthConfig",
    "generate_case",
    "generate_dataset",
    "HeatmapStack",
    "LabeledCase",
    "average_slices",
    "load_case",
    "make_target",
    "normalize01",
    "save_case",
    "AdamState",
    "TrainConfig",
    "adam_step",
    "masked_mse",
    "total_loss",
    "train",
]
