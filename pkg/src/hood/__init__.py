"""Causal content/style disentanglement for open-set recognition on factored synthetic data.

The package trains a dual-branch variational model whose content latent
predicts the class and whose style latent predicts the domain, uses
adversarial interventions on either latent to synthesise benign and malign
samples, and recognises unknowns with a one-vs-all head on the content latent.
"""
from .core import NonFiniteError, precision
from .data import FactoredDataset, FactorSpec, generate_synthetic, load_dataset, save_dataset
from .intervention import AugmentedSample, InterventionConfig, pgd_augment
from .model import ModelConfig, ModelParams, elbo_tilde, init_params, load_checkpoint, save_checkpoint
from .ova import is_ood, ova_score
from .tasks import (EvalReport, TaskSpec, auroc, cross_prediction, ood_detection_task, open_set_da_task,
                    open_set_ssl_task, run_task)
from .trainer import DataPools, TrainConfig, TrainingDiverged, train_hood

__version__ = "0.1.0"

__all__ = [
    "AugmentedSample", "DataPools", "EvalReport", "FactorSpec", "FactoredDataset", "InterventionConfig",
    "ModelConfig", "ModelParams", "NonFiniteError", "TaskSpec", "TrainConfig", "TrainingDiverged", "auroc",
    "cross_prediction", "elbo_tilde", "generate_synthetic", "init_params", "is_ood", "load_checkpoint",
    "load_dataset", "ood_detection_task", "open_set_da_task", "open_set_ssl_task", "ova_score", "pgd_augment",
    "precision", "run_task", "save_checkpoint", "save_dataset", "train_hood",
]
