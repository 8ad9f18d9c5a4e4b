"""Cross-validation and ablation drivers built on the single-run trainers."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from ..data import DatasetManifest, ImageCache, SplitPlan, patient_kfold
from ..errors import ConfigError, KDOCTError, TrainingError
from ..losses import DistillParams
from .configs import DistillRunConfig, TrainRunConfig
from .report import RunReport, format_mean_std, mean_std
from .training import distill_student, train_teacher

METRICS = ("accuracy", "sensitivity", "specificity")
TOGGLES = ("no_heavy_aug", "no_swa", "no_focal", "no_kd")


def _test_metrics(report: RunReport) -> dict:
    test = report.final.get("test", {})
    return {m: test.get(m) for m in METRICS}


def cross_validate(cfg: TrainRunConfig, manifest: DatasetManifest, k: int, out_dir, seed: int = 0,
                   distill: DistillRunConfig | None = None, cache: ImageCache | None = None,
                   config_echo: dict | None = None, provenance: dict | None = None) -> RunReport:
    """Train one teacher (and optionally one student) per patient-disjoint fold.

    The held-out fold serves as both validation and test set. Each metric is
    summarized as mean and population standard deviation across folds. When
    a fold fails, the report written so far is kept on disk and the error is
    re-raised.
    """
    if k < 2:
        raise ConfigError(f"cross-validation needs k >= 2, got {k}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache or ImageCache(manifest)
    plan = patient_kfold(manifest, k, seed)
    echo = config_echo or {"teacher": cfg.to_dict(), **({"distill": distill.to_dict()} if distill else {})}
    report = RunReport(kind="cross_validation", config=echo, provenance=provenance or {}, split_hash=plan.hash)
    report.final["k"] = k
    report.final["fold_sizes"] = [len(f) for f in plan.folds]
    (out / "folds.json").write_text(plan.to_json(), encoding="utf-8")

    for i in range(k):
        fold_dir = out / f"fold{i}"
        split = plan.split(i, manifest)
        try:
            t = train_teacher(cfg, manifest, split, fold_dir, cache)
            entry = {"fold": i, "split_hash": split.hash, "val_patients": list(split.val_patients),
                     "test": _test_metrics(t.report), "teacher_checkpoint": t.report.checkpoints.get("teacher")}
            if distill is not None:
                s = distill_student(replace(distill, teacher_path=str(t.checkpoint)), manifest, split, fold_dir,
                                    cache)
                entry["student_test"] = _test_metrics(s.report)
                entry["student_checkpoint"] = s.report.checkpoints.get("student")
        except KDOCTError as exc:
            report.status = f"failed at fold {i}: {exc}"
            report.write(out, "cv_report")
            raise
        report.folds.append(entry)
        report.status = f"partial: {i + 1} of {k} folds"
        report.write(out, "cv_report")

    report.summary = summarize_folds(report.folds)
    report.status = "complete"
    report.write(out, "cv_report")
    return report


def summarize_folds(folds: list[dict]) -> dict:
    """Mean ± std (percent, 2 decimals) for every metric and model."""
    out = {}
    for key, label in (("test", "teacher"), ("student_test", "student")):
        if not folds or key not in folds[0]:
            continue
        for m in METRICS:
            values = [f[key][m] for f in folds]
            out[f"{label}_{m}"] = format_mean_std(values)
            mean, std = mean_std(values)
            out[f"{label}_{m}_mean"] = mean
            out[f"{label}_{m}_std"] = std
    return out


def ablation_matrix(toggles) -> list[tuple[str, tuple]]:
    """Rows: everything on, each toggle alone, then all toggles together."""
    toggles = tuple(toggles)
    unknown = [t for t in toggles if t not in TOGGLES]
    if unknown:
        raise ConfigError(f"unknown ablation toggle {unknown[0]!r}; choose from {', '.join(TOGGLES)}")
    if len(set(toggles)) != len(toggles):
        raise ConfigError("ablation toggles must be distinct")
    ordered = tuple(t for t in TOGGLES if t in toggles)
    rows = [("full", ())] + [(t, (t,)) for t in ordered]
    if len(ordered) > 1:
        rows.append(("all_off", ordered))
    return rows


def apply_toggles(cfg: TrainRunConfig, toggles) -> TrainRunConfig:
    """Switch off teacher components; anything not toggled is left as is."""
    kw = {}
    if "no_heavy_aug" in toggles:
        kw["heavy_aug"] = False
    if "no_swa" in toggles:
        kw["swa"] = False
    if "no_focal" in toggles:
        kw["loss"] = "ce"
        kw["class_weighting"] = "none"
    return cfg.replace(**kw) if kw else cfg


def hard_label_only(params: DistillParams) -> DistillParams:
    return DistillParams(params.temperature, 0.0, 1.0)


def run_ablation(toggles, cfg: TrainRunConfig, manifest: DatasetManifest, split: SplitPlan, out_dir,
                 distill: DistillRunConfig | None = None, cache: ImageCache | None = None,
                 config_echo: dict | None = None, provenance: dict | None = None) -> RunReport:
    """Run every configuration of the toggle matrix on one split and seed."""
    rows = ablation_matrix(toggles)
    if distill is None and any("no_kd" in t for _, t in rows):
        raise ConfigError("the no_kd toggle needs a student configuration")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = cache or ImageCache(manifest)
    echo = config_echo or {"teacher": cfg.to_dict(), **({"distill": distill.to_dict()} if distill else {})}
    report = RunReport(kind="ablation", config=echo, provenance=provenance or {}, split_hash=split.hash)

    teachers: dict = {}
    for name, active in rows:
        row_dir = out / name
        tcfg = apply_toggles(cfg, active)
        key = repr(tcfg.to_dict())
        if key not in teachers:  # no_kd leaves the teacher untouched, so reuse it
            teachers[key] = train_teacher(tcfg, manifest, split, row_dir, cache)
        t = teachers[key]
        row = {"row": name, "toggles": "+".join(active) or "-", "split_hash": t.report.split_hash,
               "seed": cfg.seed, "val_accuracy": t.best_val_accuracy}
        row.update({f"test_{m}": v for m, v in _test_metrics(t.report).items()})
        if distill is not None:
            params = hard_label_only(distill.distill) if "no_kd" in active else distill.distill
            s = distill_student(replace(distill, distill=params, teacher_path=str(t.checkpoint)), manifest,
                                split, row_dir, cache)
            row["student_val_accuracy"] = s.best_val_accuracy
            row["student_test_accuracy"] = s.report.final["test"]["accuracy"]
        report.rows.append(row)
        report.write(out, "ablation_report")

    hashes = {r["split_hash"] for r in report.rows}
    if len(hashes) != 1:
        raise TrainingError(f"ablation rows used different splits: {sorted(hashes)}")
    report.summary = {"split_hashes_identical": "yes", "rows": str(len(report.rows))}
    report.write(out, "ablation_report")
    return report
