"""Training losses, pose curriculum and the joint training loop."""
from .curriculum import CurriculumState, curriculum_bounds, sample_cycle_pose, sample_semantic_poses
from .losses import (
    RenderSettings,
    combine_self_training,
    cycle_loss,
    cycle_second_pass,
    input_view_loss,
    select_hard_negative,
    self_training_loss,
    semantic_loss,
    supervised_loss,
)
from .loop import FitResult, TrainState, fit, init_state, load_state, lr_at, save_state, train_step

__all__ = [
    "CurriculumState", "curriculum_bounds", "sample_cycle_pose", "sample_semantic_poses",
    "RenderSettings", "combine_self_training", "cycle_loss", "cycle_second_pass", "input_view_loss",
    "select_hard_negative", "self_training_loss", "semantic_loss", "supervised_loss",
    "FitResult", "TrainState", "fit", "init_state", "load_state", "lr_at", "save_state", "train_step",
]
