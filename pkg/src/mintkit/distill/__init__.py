"""Knowledge distillation (CE plus temperature-scaled KL) and teacher training."""

from .trainer import (
    ALPHA_CLAMP,
    KDConfig,
    StepRecord,
    TeacherConfig,
    TrainingError,
    TrainLog,
    auto_alpha,
    kd_loss,
    parameter_digest,
    train_distill,
    train_teacher,
)

__all__ = [
    "ALPHA_CLAMP", "KDConfig", "StepRecord", "TeacherConfig", "TrainLog", "TrainingError", "auto_alpha", "kd_loss",
    "parameter_digest", "train_distill", "train_teacher",
]
