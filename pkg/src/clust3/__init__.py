"""Test-time adaptation through multi-scale, multi-head mutual-information clustering.

A small numpy autodiff engine drives a CNN with clustering projectors on its
feature maps; the projectors are trained jointly with the classifier and
their IM loss alone steers adaptation of the early blocks at test time.
"""

from .adapt import AdaptConfig, adapt_batch, baseline_ptbn, baseline_tent, prepare, run_ttt
from .data import CorruptionSpec, DatasetSpec, apply_corruption, generate_dataset
from .losses import im_loss, lemma_bounds, total_loss
from .nn import ModelBundle, ModelSpec, select_trainable
from .train import TrainConfig, evaluate, joint_train

__all__ = [
    "AdaptConfig", "adapt_batch", "baseline_ptbn", "baseline_tent", "prepare", "run_ttt",
    "CorruptionSpec", "DatasetSpec", "apply_corruption", "generate_dataset",
    "im_loss", "lemma_bounds", "total_loss",
    "ModelBundle", "ModelSpec", "select_trainable",
    "TrainConfig", "evaluate", "joint_train",
]
