"""Multiple-exit tuning of a frozen ViT with exit-specific adapters."""

from .multi_exit import ExitPlan, METModel, count_adapter_params, naive_param_count
from .train import TrainConfig, train
from .vit import ViTConfig, init_backbone

__all__ = ["ExitPlan", "METModel", "TrainConfig", "ViTConfig", "count_adapter_params",
           "init_backbone", "naive_param_count", "train"]
