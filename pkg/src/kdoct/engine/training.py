"""Teacher training and on-the-fly distillation into the student."""

from __future__ import annotations

import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..augment import sample_rng, train_pipeline, val_pipeline
from ..autodiff import Tensor, no_grad
from ..data import DatasetManifest, ImageCache, SplitPlan, batch_iterator
from ..errors import NonFiniteError, TrainingError
from ..losses import FocalParams, cross_entropy, focal_loss, inverse_frequency_alpha, kd_combined_loss
from ..models import StudentConfig, build_student, build_teacher, load_checkpoint, save_checkpoint, state_hash
from ..models.checkpoint import atomic_write_bytes, file_hash
from ..optim import (
    STOP,
    AdamW,
    EarlyStopState,
    GradientAccumulator,
    SWAState,
    early_stop_check,
    head_backbone_groups,
    lr_at,
    lr_scale_at,
    swa_finalize,
    swa_start_epoch,
    swa_update,
)
from .configs import DistillRunConfig, TrainRunConfig
from .evaluation import evaluate
from .report import RunReport, write_timing

log = logging.getLogger("kdoct")


@dataclass
class TrainResult:
    model: object
    report: RunReport
    checkpoint: Path
    checkpoints: dict = field(default_factory=dict)
    seconds: float = 0.0
    best_val_accuracy: float = 0.0


def _check_split(split: SplitPlan, manifest: DatasetManifest) -> None:
    if not split.train_idx or not split.val_idx:
        raise TrainingError("split has an empty training or validation set")
    if max(max(split.train_idx), max(split.val_idx)) >= len(manifest):
        raise TrainingError("split indices do not match the manifest")


def _input_fn(cfg: TrainRunConfig, cache: ImageCache) -> Callable:
    profile, seed = cfg.profile, cfg.seed

    def make(batch, epoch):
        if cfg.heavy_aug:
            views = [train_pipeline(img, profile, sample_rng(seed, epoch, idx))
                     for img, idx in zip(batch.images, batch.indices)]
        else:
            views = [val_pipeline(img, profile) for img in batch.images]
        return np.stack(views)

    return make


def _fit(model, cfg: TrainRunConfig, manifest, split, cache, step_loss, report: RunReport,
         last_good_path: Path) -> tuple[OrderedDict, float, SWAState]:
    """Shared epoch loop. Returns (best state, best val accuracy, SWA state)."""
    model.set_rng(np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED])))
    opt = AdamW(OrderedDict(model.named_parameters()),
                head_backbone_groups(model, cfg.head_lr, cfg.backbone_lr, cfg.weight_decay))
    acc = GradientAccumulator(opt, cfg.accumulation_steps)
    schedule = cfg.schedule()
    stopper = EarlyStopState(cfg.patience)
    swa = SWAState()
    swa_from = swa_start_epoch(cfg.max_epochs)
    make_inputs = _input_fn(cfg, cache)
    best_state = model.state_dict()

    for epoch in range(cfg.max_epochs):
        opt.lr_scale = lr_scale_at(schedule, epoch)
        model.train()
        losses = []
        try:
            for step, batch in enumerate(batch_iterator(manifest, split.train_idx, cfg.batch_size, True,
                                                        cfg.seed, epoch, cache)):
                loss = step_loss(model, make_inputs(batch, epoch), batch.labels, epoch, step)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError(f"training loss is {value}")
                losses.append(value)
                acc.backward(loss)
            acc.flush()
        except NonFiniteError as exc:
            save_checkpoint(_with_state(model, best_state), last_good_path, meta={"epoch": epoch})
            report.status = f"aborted at epoch {epoch}: {exc}"
            raise NonFiniteError(f"{exc} at epoch {epoch}; last good weights saved to {last_good_path}") from None

        ev = evaluate(model, manifest, split.val_idx, cfg.profile, cache, cfg.eval_batch_size)
        decision = early_stop_check(stopper, epoch, ev.metrics.accuracy, ev.loss)
        if stopper.best_epoch == epoch:
            best_state = model.state_dict()
        snapshot = cfg.swa and epoch >= swa_from
        if snapshot:
            swa_update(swa, model)
        record = {
            "epoch": epoch,
            "lr": lr_at(schedule, epoch),
            "group_lrs": opt.group_lrs(),
            "train_loss": float(np.mean(losses)),
            "val_loss": ev.loss,
            "val_accuracy": ev.metrics.accuracy,
            "val_sensitivity": ev.metrics.sensitivity,
            "val_specificity": ev.metrics.specificity,
            "swa_snapshot": snapshot,
        }
        report.history.append(record)
        log.info("epoch %d lr %.3e loss %.4f val_acc %.4f", epoch, record["lr"], record["train_loss"],
                 record["val_accuracy"])
        if decision == STOP:
            report.flags.append(f"early stop at epoch {epoch} (best epoch {stopper.best_epoch})")
            break

    if cfg.swa and swa.n == 0:
        report.flags.append(f"weight averaging enabled but training stopped before epoch {swa_from}")
    return best_state, stopper.best_metric, swa


def _with_state(model, state):
    model.load_state_dict(state)
    return model


def _finalize(model, build, cfg: TrainRunConfig, manifest, split, cache, best_state, best_acc, swa,
              out: Path, stem: str, report: RunReport, meta: dict) -> tuple[object, Path, float]:
    """Save raw-best and averaged weights; the higher validation accuracy wins."""
    model.load_state_dict(best_state)
    paths = {f"{stem}_best": out / f"{stem}_best.kdoc"}
    save_checkpoint(model, paths[f"{stem}_best"], meta={**meta, "variant": "best"})
    primary, primary_acc, chosen = model, best_acc, "best"
    if swa.n:
        averaged = build(cfg.model)
        averaged.load_state_dict(swa_finalize(swa))
        swa_acc = evaluate(averaged, manifest, split.val_idx, cfg.profile, cache, cfg.eval_batch_size).metrics.accuracy
        paths[f"{stem}_swa"] = out / f"{stem}_swa.kdoc"
        save_checkpoint(averaged, paths[f"{stem}_swa"], meta={**meta, "variant": "swa"})
        report.final["swa_val_accuracy"] = swa_acc
        report.final["swa_snapshots"] = swa.n
        if swa_acc > best_acc:
            primary, primary_acc, chosen = averaged, swa_acc, "swa"
    primary_path = out / f"{stem}.kdoc"
    atomic_write_bytes(primary_path, paths[f"{stem}_{chosen}"].read_bytes())
    paths[stem] = primary_path
    report.final["primary"] = chosen
    report.final["best_val_accuracy"] = best_acc
    report.final["primary_val_accuracy"] = primary_acc
    report.checkpoints = {name: file_hash(p) for name, p in sorted(paths.items())}

    if split.test_idx:
        ev = evaluate(primary, manifest, split.test_idx, cfg.profile, cache, cfg.eval_batch_size, tta=cfg.tta)
        report.final["test"] = ev.metrics.to_dict()
        report.final["test_confusion"] = ev.confusion.tolist()
        report.final["tta"] = cfg.tta
        if ev.metrics.degenerate:
            report.flags.append(
                f"degenerate test metrics: sensitivity excludes classes {list(ev.metrics.excluded_sensitivity)}, "
                f"specificity excludes classes {list(ev.metrics.excluded_specificity)}"
            )
    return primary, primary_path, primary_acc


def train_teacher(cfg: TrainRunConfig, manifest: DatasetManifest, split: SplitPlan, out_dir,
                  cache: ImageCache | None = None, config_echo: dict | None = None,
                  provenance: dict | None = None, stem: str = "teacher") -> TrainResult:
    """Train the teacher with focal (or cross-entropy) loss and optional weight averaging."""
    started = time.perf_counter()
    _check_split(split, manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache or ImageCache(manifest)
    if cfg.model.num_classes != manifest.num_classes:
        raise TrainingError(f"model has {cfg.model.num_classes} classes, data has {manifest.num_classes}")
    builder = build_student if isinstance(cfg.model, StudentConfig) else build_teacher
    model = builder(cfg.model)

    labels = manifest.labels()
    if cfg.loss == "focal":
        alpha = (inverse_frequency_alpha(labels[list(split.train_idx)], manifest.num_classes)
                 if cfg.class_weighting == "inverse_frequency" else None)
        params = FocalParams(cfg.focal_gamma, alpha)

        def step_loss(m, x, y, epoch, step):
            return focal_loss(m(Tensor(x)), y, params)
    else:
        def step_loss(m, x, y, epoch, step):
            return cross_entropy(m(Tensor(x)), y)

    report = RunReport(kind=model.kind, config=config_echo or cfg.to_dict(), provenance=provenance or {},
                       split_hash=split.hash)
    try:
        best_state, best_acc, swa = _fit(model, cfg, manifest, split, cache, step_loss, report,
                                         out / f"{stem}_last_good.kdoc")
        primary, path, acc = _finalize(model, builder, cfg, manifest, split, cache, best_state, best_acc, swa, out,
                                       stem, report, {"split": split.hash, "seed": cfg.seed})
    finally:
        report.write(out, f"{stem}_report")
    seconds = time.perf_counter() - started
    write_timing(out, stem, seconds, {"epochs_run": len(report.history)})
    return TrainResult(primary, report, path, dict(report.checkpoints), seconds, report.final["best_val_accuracy"])


def distill_student(dcfg: DistillRunConfig, manifest: DatasetManifest, split: SplitPlan, out_dir,
                    cache: ImageCache | None = None, config_echo: dict | None = None,
                    provenance: dict | None = None, stem: str = "student") -> TrainResult:
    """Train the student against the frozen teacher's soft labels on the same augmented batch."""
    started = time.perf_counter()
    cfg = dcfg.student
    _check_split(split, manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache or ImageCache(manifest)

    teacher = load_checkpoint(dcfg.teacher_path)
    if teacher.config.num_classes != cfg.model.num_classes or cfg.model.num_classes != manifest.num_classes:
        raise TrainingError(
            f"class count mismatch: teacher {teacher.config.num_classes}, student {cfg.model.num_classes}, "
            f"data {manifest.num_classes}"
        )
    teacher.eval()
    before = state_hash(teacher)
    teacher_file = file_hash(dcfg.teacher_path)
    model = build_student(cfg.model)

    report = RunReport(kind="student", config=config_echo or dcfg.to_dict(), provenance=provenance or {},
                       split_hash=split.hash)
    params = dcfg.distill

    def step_loss(m, x, y, epoch, step):
        with no_grad():
            t_logits = teacher(Tensor(x)).data
        loss, br = kd_combined_loss(m(Tensor(x)), t_logits, y, params)
        report.steps.append({"epoch": epoch, "step": step, "ce": br.ce, "kl": br.kl, "total": br.total})
        return loss

    try:
        best_state, best_acc, swa = _fit(model, cfg, manifest, split, cache, step_loss, report,
                                         out / f"{stem}_last_good.kdoc")
        after = state_hash(teacher)
        report.teacher = {"checkpoint": Path(dcfg.teacher_path).name, "file_sha256": teacher_file,
                          "state_hash_before": before, "state_hash_after": after, "unchanged": before == after}
        if before != after:
            raise TrainingError("teacher parameters changed during distillation")
        primary, path, acc = _finalize(model, build_student, cfg, manifest, split, cache, best_state, best_acc, swa,
                                       out, stem, report, {"split": split.hash, "seed": cfg.seed,
                                                           "teacher_sha256": teacher_file})
    finally:
        report.write(out, f"{stem}_report")
    seconds = time.perf_counter() - started
    write_timing(out, stem, seconds, {"epochs_run": len(report.history)})
    return TrainResult(primary, report, path, dict(report.checkpoints), seconds, report.final["best_val_accuracy"])
