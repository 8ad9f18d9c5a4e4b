"""Command-line entry point: ``kdoct <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .augment import AugmentationProfile
from .config import load_config
from .data import (
    ImageCache,
    SplitPlan,
    load_manifest,
    patient_kfold,
    patient_stratified_split,
    synth_generate,
)
from .engine import RunReport, cross_validate, evaluate, distill_student, run_ablation, train_teacher
from .engine.report import render_table, write_timing
from .errors import ConfigError, KDOCTError
from .models import load_checkpoint
from .models.checkpoint import atomic_write_bytes

log = logging.getLogger("kdoct")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _manifest_path(args, cfg=None) -> str:
    path = args.manifest or (cfg.get("data.manifest") if cfg else None)
    if not path:
        raise ConfigError("no manifest: pass --manifest or set data.manifest")
    return path


def _load_split(args, manifest, cfg, out: Path) -> SplitPlan:
    """Read --split (or data.split); otherwise derive one from the run seed and save it."""
    path = args.split or cfg.get("data.split")
    if path:
        return SplitPlan.from_json(Path(path).read_text(encoding="utf-8"), manifest)
    split = patient_stratified_split(manifest, seed=cfg.get("run.seed"))
    _write(out / "split.json", split.to_json())
    return split


def _load_config(args, path=None):
    return load_config(path or args.config, args.set or (), args.seed)


def _echo_config(cfg, out: Path, stem: str) -> None:
    _write(out / f"{stem}_config.cfg", cfg.to_text())


# -- commands ----------------------------------------------------------------

def cmd_synth_data(args) -> int:
    counts = args.per_class
    patients = args.patients or tuple(max(1, c // 10) for c in counts)
    m = synth_generate(args.out, counts, patients, image_size=args.size, seed=args.seed)
    print(f"wrote {len(m)} images for {len(m.patients())} patients to {args.out}")
    return 0


def cmd_split(args) -> int:
    manifest = load_manifest(args.manifest)
    split = patient_stratified_split(manifest, args.test_fraction, args.val_fraction, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "split.json", split.to_json())
    print(f"split {split.hash}: train {len(split.train_idx)}, val {len(split.val_idx)}, test {len(split.test_idx)}")
    return 0


def cmd_kfold(args) -> int:
    manifest = load_manifest(args.manifest)
    plan = patient_kfold(manifest, args.k, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "folds.json", plan.to_json())
    for i in range(plan.k):
        _write(out / f"fold{i}_split.json", plan.split(i, manifest).to_json())
    print(f"folds {plan.hash}: patients per fold {[len(f) for f in plan.folds]}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(_manifest_path(args, cfg))
    split = _load_split(args, manifest, cfg, out)
    _echo_config(cfg, out, "teacher")
    res = train_teacher(cfg.train_config(), manifest, split, out, config_echo=cfg.echo(),
                        provenance=cfg.provenance_echo())
    print(f"teacher: best val accuracy {res.best_val_accuracy:.4f}, primary {res.report.final['primary']}, "
          f"checkpoint {res.checkpoint}")
    return 0


def cmd_distill_student(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(_manifest_path(args, cfg))
    split = _load_split(args, manifest, cfg, out)
    dcfg = cfg.distill_config(args.teacher)
    _echo_config(cfg, out, "student")
    res = distill_student(dcfg, manifest, split, out, config_echo=cfg.echo(), provenance=cfg.provenance_echo())
    print(f"student: best val accuracy {res.best_val_accuracy:.4f}, teacher unchanged "
          f"{res.report.teacher['unchanged']}, checkpoint {res.checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split:
        split = SplitPlan.from_json(Path(args.split).read_text(encoding="utf-8"), manifest)
        indices = getattr(split, f"{args.subset}_idx")
        split_hash = split.hash
    else:
        indices, split_hash = tuple(range(len(manifest))), ""
    if not indices:
        raise ConfigError(f"the {args.subset} subset is empty")
    profile = AugmentationProfile(crop_size=model.config.input_size, resize_large=model.config.input_size)
    ev = evaluate(model, manifest, indices, profile, ImageCache(manifest), args.batch_size, tta=args.tta)
    report = RunReport(kind="evaluation", split_hash=split_hash,
                       config={"checkpoint": Path(args.checkpoint).name, "subset": args.subset if args.split else "all",
                               "tta": args.tta, "batch_size": args.batch_size})
    report.final = {"metrics": ev.metrics.to_dict(), "confusion": ev.confusion.tolist(), "loss": ev.loss,
                    "samples": len(indices)}
    if ev.metrics.degenerate:
        report.flags.append("degenerate metrics: some classes are absent from the evaluated labels")
    report.write(out, "eval_report")
    write_timing(out, "eval", time.perf_counter() - started)
    m = ev.metrics
    print(f"accuracy {m.accuracy:.4f} sensitivity {m.sensitivity:.4f} specificity {m.specificity:.4f} "
          f"(tta {'on' if args.tta else 'off'}, {len(indices)} samples)")
    return 0


def _student_pair(args, cfg):
    if not args.student_config:
        return None, {"teacher": cfg.echo()}, {f"teacher.{k}": v for k, v in cfg.provenance_echo().items()}
    scfg = load_config(args.student_config, args.student_set or (), args.seed)
    # the teacher path is filled in per run
    dcfg = scfg.distill_config(teacher_path="pending")
    echo = {"teacher": cfg.echo(), "student": scfg.echo()}
    prov = {f"teacher.{k}": v for k, v in cfg.provenance_echo().items()}
    prov.update({f"student.{k}": v for k, v in scfg.provenance_echo().items()})
    return dcfg, echo, prov


def cmd_cross_validate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(_manifest_path(args, cfg))
    distill, echo, prov = _student_pair(args, cfg)
    _echo_config(cfg, out, "teacher")
    report = cross_validate(cfg.train_config(), manifest, args.k, out, seed=cfg.get("run.seed"), distill=distill,
                            config_echo=echo, provenance=prov)
    for key in sorted(k for k in report.summary if not k.endswith(("_mean", "_std"))):
        print(f"{key}: {report.summary[key]}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(_manifest_path(args, cfg))
    split = _load_split(args, manifest, cfg, out)
    distill, echo, prov = _student_pair(args, cfg)
    _echo_config(cfg, out, "teacher")
    toggles = [t for t in args.toggles.split(",") if t]
    report = run_ablation(toggles, cfg.train_config(), manifest, split, out, distill=distill, config_echo=echo,
                          provenance=prov)
    print(render_table(report.rows))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdoct", description="Teacher/student OCT classification on numpy.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp, split=True):
        sp.add_argument("--config", required=True, help="config file or preset name")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--manifest", help="dataset manifest (default: data.manifest)")
        if split:
            sp.add_argument("--split", help="split file (default: data.split, else derived from the seed)")
        sp.add_argument("--out", required=True)

    sp = sub.add_parser("synth-data", help="generate the synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--per-class", type=_ints, default=(200, 200, 200), help="images per class, e.g. 200,200,200")
    sp.add_argument("--patients", type=_ints, help="patients per class (default: one per 10 images)")
    sp.add_argument("--size", type=int, default=32)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("split", help="patient-level train/val/test split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float, default=0.2)
    sp.add_argument("--val-fraction", type=float, default=0.2, help="fraction of the non-test patients")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("kfold", help="patient-level k-fold plan")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_kfold)

    sp = sub.add_parser("train-teacher", help="train the teacher")
    run_opts(sp)
    sp.set_defaults(func=cmd_train_teacher)

    sp = sub.add_parser("distill-student", help="distill the student from a frozen teacher")
    run_opts(sp)
    sp.add_argument("--teacher", help="teacher checkpoint (default: distill.teacher)")
    sp.set_defaults(func=cmd_distill_student)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", help="split file; without it every manifest record is evaluated")
    sp.add_argument("--subset", choices=("train", "val", "test"), default="test")
    sp.add_argument("--tta", action="store_true", help="average logits over the 5 test-time views")
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (("cross-validate", cmd_cross_validate, "patient-level k-fold cross-validation"),
                                 ("ablate", cmd_ablate, "toggle matrix on one split")):
        sp = sub.add_parser(name, help=helptext)
        run_opts(sp, split=name == "ablate")
        sp.add_argument("--student-config", help="also distill a student with this config")
        sp.add_argument("--student-set", action="append", metavar="KEY=VALUE", help="override a student key")
        if name == "cross-validate":
            sp.add_argument("--k", type=int, default=5)
        else:
            sp.add_argument("--toggles", default="no_heavy_aug,no_swa,no_focal",
                            help="comma-separated subset of no_heavy_aug,no_swa,no_focal,no_kd")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except KDOCTError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error[io]: {exc.filename}: no such file", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error[interrupted]: stopped by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
