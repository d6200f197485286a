"""Multi-task CNN for skin-lesion segmentation and melanoma / SK classification.

Everything runs on a small reverse-mode autodiff engine over numpy arrays.
"""
from importlib.metadata import PackageNotFoundError, version

from .data import Dataset, Sample, load_dataset, make_folds
from .metrics import EvalReport, auc, evaluate, jaccard
from .model import ModelConfig, MultiTaskModel, build_model, forward, joint_loss
from .synth import SynthConfig, generate
from .train import TrainConfig, cross_validate, run_ablation, train_fold, train_model

try:
    __version__ = version("lesionmt")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "Dataset",
    "EvalReport",
    "ModelConfig",
    "MultiTaskModel",
    "Sample",
    "SynthConfig",
    "TrainConfig",
    "auc",
    "build_model",
    "cross_validate",
    "evaluate",
    "forward",
    "generate",
    "jaccard",
    "joint_loss",
    "load_dataset",
    "make_folds",
    "run_ablation",
    "train_fold",
    "train_model",
]
