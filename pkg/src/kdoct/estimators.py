"""scikit-learn style wrappers around teacher training and distillation.

Images go in as a sequence of uint8 arrays (H x W or H x W x C). Passing
``groups`` keeps each group's images on one side of the internal
train/validation split, the same way patient ids do for the command line.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .augment import student_profile, teacher_profile
from .autodiff.functional import log_softmax_array
from .data import SplitPlan, in_memory_dataset, patient_kfold
from .engine import DistillRunConfig, predict_logits, student_run_config, teacher_run_config
from .engine.training import distill_student, train_teacher
from .errors import DataError
from .losses import DistillParams
from .models import StudentConfig, TeacherConfig, save_checkpoint


def _check_images(X) -> list:
    if isinstance(X, np.ndarray):
        if X.ndim not in (3, 4):
            raise ValueError(f"expected a stack of images with 3 or 4 dimensions, got shape {X.shape}")
        images = list(X)
    else:
        images = [np.asarray(x) for x in X]
    if not images:
        raise ValueError("no images given")
    for img in images:
        if img.dtype != np.uint8:
            raise ValueError(f"images must be uint8, got {img.dtype}")
    return images


def _holdout_split(manifest, val_fraction: float, seed: int) -> SplitPlan:
    k = max(2, int(round(1.0 / val_fraction)))
    if len(manifest.patients()) < k:
        raise DataError(f"need at least {k} groups for a {val_fraction:.0%} validation hold-out")
    plan = patient_kfold(manifest, k, seed)
    val = plan.folds[0]
    train = [p for f in plan.folds[1:] for p in f]
    return SplitPlan(train, val, (), seed=seed).with_indices(manifest)


class _BaseClassifier(ClassifierMixin, BaseEstimator):
    _kind = ""

    def _encode(self, y):
        check_classification_targets(y)
        self.classes_, encoded = np.unique(np.asarray(y), return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        return encoded

    def _run_config(self, k: int, image_size: int):
        raise NotImplementedError

    def _train(self, cfg, manifest, split, cache, out):
        raise NotImplementedError

    def fit(self, X, y, groups=None):
        images = _check_images(X)
        encoded = self._encode(y)
        manifest, cache = in_memory_dataset(images, encoded, groups, [str(c) for c in self.classes_])
        split = _holdout_split(manifest, self.val_fraction, self.seed)
        cfg = self._run_config(len(self.classes_), self.image_size)
        if self.work_dir is None:
            with tempfile.TemporaryDirectory() as tmp:
                result = self._train(cfg, manifest, split, cache, Path(tmp))
        else:
            result = self._train(cfg, manifest, split, cache, Path(self.work_dir))
        self.model_ = result.model
        self.profile_ = cfg.profile
        self.report_ = result.report
        self.best_val_accuracy_ = result.best_val_accuracy
        self.n_features_in_ = int(np.prod(images[0].shape))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        logits = predict_logits(self.model_, _check_images(X), self.profile_, tta=self.tta)
        return logits.astype(np.float64)

    def predict_proba(self, X):
        return np.exp(log_softmax_array(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class TeacherClassifier(_BaseClassifier):
    """ConvNeXt-style teacher trained with focal loss and weight averaging."""

    _kind = "teacher"

    def __init__(self, max_epochs=30, head_lr=5e-3, backbone_lr=1e-3, weight_decay=0.05, warmup_epochs=3,
                 min_lr=1e-6, batch_size=4, accumulation_steps=4, heavy_aug=True, swa=True, loss="focal",
                 tta=False, stage_depths=(2, 2, 4, 2), stage_widths=(16, 32, 64, 128), image_size=32,
                 val_fraction=0.2, seed=0, work_dir=None):
        self.max_epochs = max_epochs
        self.head_lr = head_lr
        self.backbone_lr = backbone_lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.min_lr = min_lr
        self.batch_size = batch_size
        self.accumulation_steps = accumulation_steps
        self.heavy_aug = heavy_aug
        self.swa = swa
        self.loss = loss
        self.tta = tta
        self.stage_depths = stage_depths
        self.stage_widths = stage_widths
        self.image_size = image_size
        self.val_fraction = val_fraction
        self.seed = seed
        self.work_dir = work_dir

    def _run_config(self, k, image_size):
        model = TeacherConfig(stage_depths=self.stage_depths, stage_widths=self.stage_widths, num_classes=k,
                              input_size=image_size)
        profile = teacher_profile().with_overrides(crop_size=image_size,
                                                   resize_large=int(round(image_size * 1.25)))
        return teacher_run_config(model=model, profile=profile, heavy_aug=self.heavy_aug, loss=self.loss,
                                  head_lr=self.head_lr, backbone_lr=self.backbone_lr,
                                  weight_decay=self.weight_decay, min_lr=self.min_lr,
                                  warmup_epochs=self.warmup_epochs, max_epochs=self.max_epochs,
                                  patience=self.max_epochs, batch_size=self.batch_size,
                                  accumulation_steps=self.accumulation_steps, swa=self.swa, tta=self.tta,
                                  seed=self.seed)

    def _train(self, cfg, manifest, split, cache, out):
        return train_teacher(cfg, manifest, split, out, cache)


class StudentClassifier(_BaseClassifier):
    """Compact student distilled from a fitted :class:`TeacherClassifier`
    (or a teacher checkpoint path)."""

    _kind = "student"

    def __init__(self, teacher=None, max_epochs=30, lr=3e-3, weight_decay=0.01, warmup_epochs=3, min_lr=1e-6,
                 batch_size=8, accumulation_steps=2, heavy_aug=True, temperature=4.0, alpha_soft=0.7,
                 beta_hard=0.3, tta=False, widths=(16, 24, 40), block_counts=(1, 2, 2), image_size=32,
                 val_fraction=0.2, seed=0, work_dir=None):
        self.teacher = teacher
        self.max_epochs = max_epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.min_lr = min_lr
        self.batch_size = batch_size
        self.accumulation_steps = accumulation_steps
        self.heavy_aug = heavy_aug
        self.temperature = temperature
        self.alpha_soft = alpha_soft
        self.beta_hard = beta_hard
        self.tta = tta
        self.widths = widths
        self.block_counts = block_counts
        self.image_size = image_size
        self.val_fraction = val_fraction
        self.seed = seed
        self.work_dir = work_dir

    def _run_config(self, k, image_size):
        model = StudentConfig(block_counts=self.block_counts, widths=self.widths, num_classes=k,
                              input_size=image_size)
        profile = student_profile().with_overrides(crop_size=image_size,
                                                   resize_large=int(round(image_size * 1.25)))
        return student_run_config(model=model, profile=profile, heavy_aug=self.heavy_aug, head_lr=self.lr,
                                  backbone_lr=self.lr, weight_decay=self.weight_decay, min_lr=self.min_lr,
                                  warmup_epochs=self.warmup_epochs, max_epochs=self.max_epochs,
                                  patience=self.max_epochs, batch_size=self.batch_size,
                                  accumulation_steps=self.accumulation_steps, tta=self.tta, seed=self.seed)

    def _train(self, cfg, manifest, split, cache, out):
        if self.teacher is None:
            raise ValueError("StudentClassifier needs a teacher")
        params = DistillParams(self.temperature, self.alpha_soft, self.beta_hard)
        if isinstance(self.teacher, TeacherClassifier):
            check_is_fitted(self.teacher, "model_")
            if not np.array_equal(self.teacher.classes_, self.classes_):
                raise ValueError("teacher and student were given different class sets")
            path = out / "teacher.kdoc"
            save_checkpoint(self.teacher.model_, path)
        else:
            path = Path(self.teacher)
        return distill_student(DistillRunConfig(cfg, params, str(path)), manifest, split, out, cache)
