"""Two-stage supervised contrastive learning with focal-loss fine-tuning and multimodal fusion.

Stage 1 trains an encoder and projection head with a supervised contrastive
loss. Stage 2 freezes them and fits an auxiliary featurizer and classifier on
the encoder representation concatenated with auxiliary features.
"""

from .data import AugmentPolicy, Dataset, SyntheticSpec, generate_synthetic, load_manifest
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateInputError,
    MSCNError,
    NumericalError,
    ShapeError,
    UsageError,
    ValidationError,
)
from .evaluation import embedding_quality, evaluate_classifier, evaluate_embeddings
from .losses import LossConfig, cross_entropy, focal_loss, supervised_contrastive_loss
from .model import ModelConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .training import OptimizerConfig, TrainConfig, run_pipeline, train_classifier, train_representation

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy", "Dataset", "SyntheticSpec", "generate_synthetic", "load_manifest",
    "CheckpointError", "ConfigError", "DegenerateInputError", "MSCNError", "NumericalError",
    "ShapeError", "UsageError", "ValidationError",
    "embedding_quality", "evaluate_classifier", "evaluate_embeddings",
    "LossConfig", "cross_entropy", "focal_loss", "supervised_contrastive_loss",
    "ModelConfig", "ModelParams", "init_params", "load_checkpoint", "save_checkpoint",
    "OptimizerConfig", "TrainConfig", "run_pipeline", "train_classifier", "train_representation",
]
