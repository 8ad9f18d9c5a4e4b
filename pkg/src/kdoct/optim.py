"""AdamW with parameter groups, warmup + cosine schedule, gradient
accumulation, stochastic weight averaging and early stopping."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .autodiff import functional as F
from .errors import NonFiniteError, ShapeError, TrainingError

HEAD_PREFIX = "head."


@dataclass(frozen=True)
class ParamGroup:
    names: tuple
    base_lr: float
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if self.base_lr < 0 or self.weight_decay < 0:
            raise ValueError("base_lr and weight_decay must be nonnegative")


def head_backbone_groups(model, head_lr: float, backbone_lr: float, weight_decay: float,
                         head_prefix: str = HEAD_PREFIX) -> list[ParamGroup]:
    """Split parameters into the classifier head and everything else."""
    names = [n for n, _ in model.named_parameters()]
    head = [n for n in names if n.startswith(head_prefix)]
    if not head:
        raise TrainingError(f"model has no parameters under {head_prefix!r}")
    backbone = [n for n in names if not n.startswith(head_prefix)]
    return [ParamGroup(tuple(head), head_lr, weight_decay), ParamGroup(tuple(backbone), backbone_lr, weight_decay)]


def check_groups(groups, names) -> None:
    seen: dict[str, int] = {}
    for i, g in enumerate(groups):
        for n in g.names:
            if n in seen:
                raise TrainingError(f"parameter {n!r} appears in groups {seen[n]} and {i}")
            seen[n] = i
    missing = [n for n in names if n not in seen]
    if missing:
        raise TrainingError(f"parameter {missing[0]!r} belongs to no group")
    unknown = [n for n in seen if n not in set(names)]
    if unknown:
        raise TrainingError(f"group lists unknown parameter {unknown[0]!r}")


def adamw_update(param, grad, m, v, t, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place AdamW update of ``param`` (t is the 1-based step index)."""
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """Decoupled-weight-decay Adam over named parameter groups.

    Each group's learning rate is ``base_lr * lr_scale``; the training loop
    sets ``lr_scale`` once per epoch from the schedule so every group follows
    the same curve and their ratio stays fixed.
    """

    def __init__(self, named_params, groups, betas=(0.9, 0.999), eps=1e-8):
        self.params = OrderedDict(named_params)
        check_groups(groups, list(self.params))
        self.groups = list(groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_scale = 1.0
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def group_lrs(self) -> list[float]:
        return [g.base_lr * self.lr_scale for g in self.groups]

    def step(self) -> None:
        for g in self.groups:
            for n in g.names:
                grad = self.params[n].grad
                if grad is None:
                    raise TrainingError(f"missing gradient for parameter {n!r}")
                if not np.all(np.isfinite(grad)):
                    bad = int(np.size(grad) - np.isfinite(grad).sum())
                    raise NonFiniteError(
                        f"non-finite gradient in {n!r} at optimizer step {self.step_count + 1} "
                        f"({bad} of {np.size(grad)} entries)"
                    )
        self.step_count += 1
        for g, lr in zip(self.groups, self.group_lrs()):
            for n in g.names:
                p = self.params[n]
                adamw_update(p.data, p.grad.astype(p.data.dtype), self.m[n], self.v[n], self.step_count,
                             lr, g.weight_decay, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- learning-rate schedule --------------------------------------------------

@dataclass(frozen=True)
class LRSchedule:
    base_lr: float
    min_lr: float
    warmup_epochs: int
    total_epochs: int

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs} and {self.total_epochs}"
            )
        if not 0 <= self.min_lr <= self.base_lr:
            raise ValueError(f"need 0 <= min_lr <= base_lr, got {self.min_lr} and {self.base_lr}")


def lr_at(schedule: LRSchedule, epoch: float) -> float:
    """Linear warmup to base_lr, then single-cycle cosine down to min_lr.

    The cosine is written around its midpoint so that the first cosine
    epoch, the halfway point and the final epoch come out exactly as
    base_lr, (base_lr + min_lr) / 2 and min_lr. Fractional epochs are
    accepted so the halfway point can be probed when it falls between
    two whole epochs.
    """
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    w = schedule.warmup_epochs
    if epoch < w:
        return schedule.base_lr * ((epoch + 1) / w)
    span = schedule.total_epochs - w - 1
    progress = (epoch - w) / span if span > 0 else 1.0
    if progress >= 1.0:
        return schedule.min_lr
    if progress <= 0.0:
        return schedule.base_lr
    mid = 0.5 * (schedule.base_lr + schedule.min_lr)
    return mid + 0.5 * (schedule.base_lr - schedule.min_lr) * math.cos(math.pi * progress)


def lr_scale_at(schedule: LRSchedule, epoch: int) -> float:
    """Schedule value relative to its base, applied to every group's base_lr."""
    return lr_at(schedule, epoch) / schedule.base_lr if schedule.base_lr else 0.0


# -- gradient accumulation ---------------------------------------------------

class GradientAccumulator:
    """Scale each micro-batch loss by 1/steps and step every ``steps`` calls."""

    def __init__(self, optimizer: AdamW, steps: int):
        if steps < 1:
            raise ValueError(f"accumulation steps must be >= 1, got {steps}")
        self.optimizer = optimizer
        self.steps = steps
        self.pending = 0

    def backward(self, loss) -> bool:
        """Backpropagate one micro-batch loss; returns True when a step was taken."""
        scaled = F.mul(loss, 1.0 / self.steps) if self.steps > 1 else loss
        scaled.backward()
        self.pending += 1
        if self.pending == self.steps:
            self._step()
            return True
        return False

    def flush(self) -> bool:
        """Step on a trailing partial window, rescaled to its own mean."""
        if not self.pending:
            return False
        factor = self.steps / self.pending
        if factor != 1.0:
            for p in self.optimizer.params.values():
                if p.grad is not None:
                    p.grad = p.grad * factor
        self._step()
        return True

    def _step(self) -> None:
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.pending = 0


def accumulate_and_step(optimizer: AdamW, micro_batch_losses, accumulation_steps: int) -> int:
    """Drive ``optimizer`` over an iterable of loss closures; returns steps taken."""
    acc = GradientAccumulator(optimizer, accumulation_steps)
    steps = 0
    for loss_fn in micro_batch_losses:
        steps += acc.backward(loss_fn())
    return steps + acc.flush()


def effective_batch(batch_size: int, accumulation_steps: int) -> int:
    return batch_size * accumulation_steps


# -- stochastic weight averaging --------------------------------------------

@dataclass
class SWAState:
    mean: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    n: int = 0


def swa_start_epoch(total_epochs: int) -> int:
    return int(math.floor(0.75 * total_epochs))


def swa_update(state: SWAState, model) -> SWAState:
    """Fold the model's current parameters into the running mean."""
    snapshot = OrderedDict((n, p.data) for n, p in model.named_parameters()) if hasattr(model, "named_parameters") \
        else OrderedDict(model)
    if state.n == 0:
        state.mean = OrderedDict((n, np.zeros(w.shape, dtype=np.float64)) for n, w in snapshot.items())
    elif list(snapshot) != list(state.mean):
        raise ShapeError("parameter names changed between weight-averaging snapshots")
    for n, w in snapshot.items():
        mean = state.mean[n]
        if mean.shape != w.shape:
            raise ShapeError(f"snapshot shape {w.shape} for {n!r} does not match running mean {mean.shape}")
        mean += (w.astype(np.float64) - mean) / (state.n + 1)
    state.n += 1
    return state


def swa_finalize(state: SWAState) -> "OrderedDict[str, np.ndarray]":
    if state.n == 0:
        raise TrainingError("no weight-averaging snapshots were collected")
    return OrderedDict((n, m.copy()) for n, m in state.mean.items())


# -- early stopping ----------------------------------------------------------

CONTINUE = "continue"
STOP = "stop"


@dataclass
class EarlyStopState:
    patience: int
    best_metric: float = -math.inf
    best_epoch: int = -1
    best_loss: float = math.inf


def early_stop_check(state: EarlyStopState, epoch: int, metric: float, loss: float | None = None) -> str:
    """Track the best (higher is better) metric; ties go to the lower loss."""
    if not math.isfinite(metric):
        raise NonFiniteError(f"early-stopping metric is not finite at epoch {epoch}")
    loss = math.inf if loss is None else loss
    improved = metric > state.best_metric or (metric == state.best_metric and loss < state.best_loss)
    if improved:
        state.best_metric, state.best_epoch, state.best_loss = metric, epoch, loss
    return STOP if epoch - state.best_epoch > state.patience else CONTINUE
