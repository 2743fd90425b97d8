"""Latent-space multimodal alignment with a multi-gate top-K mixture of experts.

A predictor maps the embedding of one or more input modalities to the
embedding space of the output modalities. Two gates route over shared
experts: one output is scored contrastively, the other by squared distance.
Tasks (directions between modality sets) are trained by alternating
gradient descent.
"""

from .config import PRESETS, parse_config, preset
from .data import (Dataset, ModalityRegistry, ModalitySpec, SynthConfig, TaskSpec, generate,
                   load_dataset, save_dataset)
from .losses import LossConfig
from .numeric import NArray, Tape, backward, finite_diff_grad
from .pipeline import run_experiment
from .predictor import MoEConfig, build_predictor
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "parse_config", "preset",
    "Dataset", "ModalityRegistry", "ModalitySpec", "SynthConfig", "TaskSpec", "generate",
    "load_dataset", "save_dataset",
    "LossConfig", "NArray", "Tape", "backward", "finite_diff_grad",
    "run_experiment", "MoEConfig", "build_predictor",
    "TrainConfig", "Trainer", "load_checkpoint", "save_checkpoint",
]
