"""adarank: predict per-module LoRA ranks from perturbation disagreement.

The workbench bundles a deterministic float64 tensor engine, a toy
transformer encoder, heterogeneous-rank LoRA finetuning, and a CLI that
scores module criticality, converts scores to rank plans, and compares
plans against uniform-rank baselines at matched budgets.
"""

from ._version import __version__
from .model import ModelConfig, ModuleKind, ModulePath, TransformerModel, list_modules
from .lora import LoraAdapter, RankPlan, attach, merge, trainable_param_count
from .scoring import PerturbationConfig, ScoreVector, score_modules
from .allocation import joint_ranks, random_scores, ranks_from_scores, separate_ranks, validate_plan

__all__ = [
    "__version__",
    "ModelConfig",
    "ModuleKind",
    "ModulePath",
    "TransformerModel",
    "list_modules",
    "LoraAdapter",
    "RankPlan",
    "attach",
    "merge",
    "trainable_param_count",
    "PerturbationConfig",
    "ScoreVector",
    "score_modules",
    "ranks_from_scores",
    "separate_ranks",
    "joint_ranks",
    "random_scores",
    "validate_plan",
]
