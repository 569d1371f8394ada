"""Transformer surrogate for pool-boiling fields with level-set reinitialization."""

from .datasets import FieldState, GeneratorConfig, Trajectory, read_trajectory, synth_generate, write_trajectory
from .fluids import BoilingCondition, FluidParams, derive_nondimensional, make_params
from .harness import TrainConfig, evaluate, finetune, rollout, train
from .levelset import ReinitConfig, eikonal_residual, sussman_reinit
from .model import Checkpoint, ModelConfig, Nucleus, load_checkpoint, save_checkpoint

__all__ = [
    "BoilingCondition", "Checkpoint", "FieldState", "FluidParams", "GeneratorConfig", "ModelConfig",
    "Nucleus", "ReinitConfig", "TrainConfig", "Trajectory", "derive_nondimensional", "eikonal_residual",
    "evaluate", "finetune", "load_checkpoint", "make_params", "read_trajectory", "rollout",
    "save_checkpoint", "sussman_reinit", "synth_generate", "train", "write_trajectory",
]
__version__ = "0.1.0"
