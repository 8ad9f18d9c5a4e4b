"""Run configurations for teacher training and student distillation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from ..augment import AugmentationProfile, student_profile, teacher_profile
from ..errors import ConfigError
from ..losses import DistillParams
from ..models import StudentConfig, TeacherConfig
from ..optim import LRSchedule


@dataclass(frozen=True)
class TrainRunConfig:
    model: object = field(default_factory=TeacherConfig)
    profile: AugmentationProfile = field(default_factory=teacher_profile)
    heavy_aug: bool = True
    loss: str = "focal"
    focal_gamma: float = 2.0
    class_weighting: str = "inverse_frequency"
    head_lr: float = 1e-4
    backbone_lr: float = 2e-5
    weight_decay: float = 0.05
    min_lr: float = 1e-7
    warmup_epochs: int = 10
    max_epochs: int = 150
    patience: int = 25
    batch_size: int = 4
    accumulation_steps: int = 4
    swa: bool = True
    tta: bool = True
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("focal", "ce"):
            raise ConfigError(f"loss must be 'focal' or 'ce', got {self.loss!r}")
        if self.class_weighting not in ("inverse_frequency", "none"):
            raise ConfigError(f"class_weighting must be 'inverse_frequency' or 'none', got {self.class_weighting!r}")
        if self.batch_size < 1 or self.accumulation_steps < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes and accumulation steps must be >= 1")
        if self.patience < 0 or self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1 and patience >= 0")
        if self.head_lr <= 0 or self.backbone_lr <= 0:
            raise ConfigError("learning rates must be positive")
        self.schedule()

    def schedule(self) -> LRSchedule:
        """Shared curve, expressed at the head learning rate."""
        try:
            return LRSchedule(self.head_lr, self.min_lr, self.warmup_epochs, self.max_epochs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("model", "profile")}
        d["model"] = self.model.to_dict()
        d["model_kind"] = "teacher" if isinstance(self.model, TeacherConfig) else "student"
        d["profile"] = self.profile.to_dict()
        return d

    def replace(self, **kw) -> "TrainRunConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class DistillRunConfig:
    student: TrainRunConfig
    distill: DistillParams = field(default_factory=DistillParams)
    teacher_path: str = ""

    def to_dict(self) -> dict:
        return {"student": self.student.to_dict(), "distill": asdict(self.distill), "teacher_path": self.teacher_path}


def teacher_run_config(**kw) -> TrainRunConfig:
    """Full-scale teacher hyperparameters."""
    return TrainRunConfig(**kw)


def student_run_config(**kw) -> TrainRunConfig:
    """Full-scale student hyperparameters: unified lr, light augmentation,
    plain cross-entropy hard term, no weight averaging."""
    base = dict(model=StudentConfig(), profile=student_profile(), loss="ce", class_weighting="none",
                head_lr=1e-3, backbone_lr=1e-3, weight_decay=0.01, min_lr=1e-6, warmup_epochs=5,
                max_epochs=100, patience=20, batch_size=8, accumulation_steps=2, swa=False)
    base.update(kw)
    return TrainRunConfig(**base)
