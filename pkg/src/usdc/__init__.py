"""Unified static and dynamic compression of Vision Transformers, at toy scale, on a numpy autograd."""
from .autograd import RngState, Tensor, gumbel_softmax, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import make_shapes10, train_test_split
from .estimator import USDCClassifier
from .flops import FlopsReport, count_flops_oracle, flops_report, stage1_cost, stage2_cost
from .grouping import GroupPlan, apply_plan, build_plan, recursive_log2_split
from .model import EquivalenceError, USDCModel
from .static import PrunePlan, StaticParams, apply_prune, derive_prune_plan
from .trainer import TrainConfig, TrainLog, evaluate, run_pipeline, train_stage1, train_stage2, transition
from .vit import VisionTransformer, ViTConfig

__all__ = [
    "RngState", "Tensor", "gumbel_softmax", "no_grad",
    "load_checkpoint", "save_checkpoint",
    "ExperimentConfig", "load_config",
    "make_shapes10", "train_test_split",
    "USDCClassifier",
    "FlopsReport", "count_flops_oracle", "flops_report", "stage1_cost", "stage2_cost",
    "GroupPlan", "apply_plan", "build_plan", "recursive_log2_split",
    "EquivalenceError", "USDCModel",
    "PrunePlan", "StaticParams", "apply_prune", "derive_prune_plan",
    "TrainConfig", "TrainLog", "evaluate", "run_pipeline", "train_stage1", "train_stage2", "transition",
    "VisionTransformer", "ViTConfig",
]
