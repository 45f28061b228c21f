"""Recurrent multistage fusion network (RMFN) on a small numpy autodiff core."""
from .data import MultimodalExample, gen_synthetic, load_dataset, save_dataset
from .model import ModelConfig, ModelParams, build_variant, forward, load_checkpoint, save_checkpoint
from .train import TrainConfig, evaluate, grad_check, train

__version__ = "0.1.0"

__all__ = [
    "MultimodalExample", "gen_synthetic", "load_dataset", "save_dataset",
    "ModelConfig", "ModelParams", "build_variant", "forward", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "evaluate", "grad_check", "train",
]
