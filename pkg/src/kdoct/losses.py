"""Cross-entropy, focal loss and the temperature-scaled distillation loss.

All losses reduce with a mean over the batch and return a scalar Tensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor
from .errors import ShapeError


@dataclass(frozen=True)
class FocalParams:
    """``alpha`` is a per-class weight vector, or None for uniform weight 1."""

    gamma: float = 2.0
    alpha: Optional[tuple] = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.alpha is not None:
            object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
            if any(a < 0 for a in self.alpha):
                raise ValueError("focal alpha entries must be >= 0")


@dataclass(frozen=True)
class DistillParams:
    temperature: float = 4.0
    alpha_soft: float = 0.7
    beta_hard: float = 0.3

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.alpha_soft < 0 or self.beta_hard < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class KDBreakdown:
    """Per-term values of one distillation loss evaluation."""

    ce: float
    kl: float
    total: float
    temperature: float
    alpha_soft: float
    beta_hard: float


def _check_labels(logits: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}", axis=None)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} logit rows", axis=0)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = _check_labels(logits, labels)
    logp_true = F.take_along_last(F.log_softmax(logits), labels)
    return F.mean(F.neg(logp_true))


def focal_loss(logits: Tensor, labels, params: FocalParams = FocalParams()) -> Tensor:
    """Mean of ``-alpha_t * (1 - p_t) ** gamma * log(p_t)``."""
    labels = _check_labels(logits, labels)
    logp_true = F.take_along_last(F.log_softmax(logits), labels)
    terms = F.neg(logp_true)
    if params.gamma != 0.0:
        p_true = F.exp(logp_true)
        terms = F.mul(F.power(F.sub(1.0, p_true), params.gamma), terms)
    if params.alpha is not None:
        if len(params.alpha) != logits.shape[1]:
            raise ShapeError(f"alpha has {len(params.alpha)} entries for {logits.shape[1]} classes", axis=1)
        alpha_t = np.asarray(params.alpha, dtype=logits.dtype)[labels]
        terms = F.mul(terms, alpha_t)
    return F.mean(terms)


def inverse_frequency_alpha(labels: Sequence[int], num_classes: int) -> tuple:
    """Per-class weights proportional to 1/frequency, normalised to mean 1.

    Classes absent from ``labels`` get the largest observed weight.
    """
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    present = counts > 0
    if not present.any():
        return tuple([1.0] * num_classes)
    inv = np.zeros(num_classes)
    inv[present] = 1.0 / counts[present]
    inv[~present] = inv[present].max()
    inv = inv / inv.mean()
    return tuple(float(v) for v in inv)


def softened_kl(student_logits: Tensor, teacher_logits, temperature: float) -> Tensor:
    """Batch-mean KL(softmax(teacher/T) || softmax(student/T)).

    The teacher side is a constant: no gradient flows into it.
    """
    t_logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    t_logits = t_logits.astype(student_logits.dtype, copy=False)
    t = float(temperature)
    scaled = t_logits / np.asarray(t, dtype=student_logits.dtype) if t != 1.0 else t_logits
    log_pt = F.log_softmax_array(scaled)
    pt = np.exp(log_pt)
    log_ps = F.log_softmax(student_logits, t)
    per_sample = F.sum(F.mul(F.sub(log_pt, log_ps), pt), axis=1)
    return F.mean(per_sample)


def kd_combined_loss(student_logits: Tensor, teacher_logits, labels,
                     params: DistillParams = DistillParams()) -> tuple[Tensor, KDBreakdown]:
    """``beta * CE(student, labels) + alpha * T^2 * KL(teacher_T || student_T)``.

    Returns the loss and a breakdown whose ``total`` is recomputed in
    float64 from the logged term values.
    """
    t_shape = teacher_logits.shape
    if tuple(t_shape) != tuple(student_logits.shape):
        raise ShapeError(f"student logits {student_logits.shape} vs teacher logits {tuple(t_shape)}", axis=1)
    t = params.temperature
    ce = cross_entropy(student_logits, labels)
    kl = softened_kl(student_logits, teacher_logits, t)
    total = F.add(F.mul(ce, params.beta_hard), F.mul(kl, params.alpha_soft * t * t))
    ce_v, kl_v = ce.item(), kl.item()
    breakdown = KDBreakdown(
        ce=ce_v,
        kl=kl_v,
        total=params.beta_hard * ce_v + params.alpha_soft * t * t * kl_v,
        temperature=t,
        alpha_soft=params.alpha_soft,
        beta_hard=params.beta_hard,
    )
    return total, breakdown
