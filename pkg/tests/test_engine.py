import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from kdoct.augment import teacher_profile
from kdoct.autodiff import Tensor
from kdoct.data import SplitPlan, patient_stratified_split, read_pgm, synth_generate
from kdoct.engine import (
    ConfusionMatrix,
    DistillRunConfig,
    ablation_matrix,
    apply_toggles,
    confusion,
    cross_validate,
    distill_student,
    evaluate,
    format_mean_std,
    metrics_from_confusion,
    predict_logits,
    run_ablation,
    student_run_config,
    teacher_run_config,
    train_teacher,
    tta_evaluate,
)
from kdoct.engine import training as training_mod
from kdoct.errors import ConfigError, KDOCTError, NonFiniteError, TrainingError
from kdoct.losses import DistillParams
from kdoct.models import Module, StudentConfig, TeacherConfig, build_teacher, load_checkpoint
from kdoct.optim import lr_at

TINY_TEACHER = TeacherConfig(stage_depths=(1, 1, 1, 1), stage_widths=(4, 4, 8, 8), expansion_ratio=2)
TINY_STUDENT = StudentConfig(block_counts=(1, 1, 1), widths=(4, 8, 8), stem_width=4, expansion_ratio=2)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    manifest = synth_generate(root / "data", (12, 12, 12), (4, 4, 4), image_size=32, seed=3)
    return manifest, patient_stratified_split(manifest, seed=1)


def tiny_teacher_cfg(**kw):
    base = dict(model=TINY_TEACHER, head_lr=3e-3, backbone_lr=1e-3, min_lr=1e-5, warmup_epochs=1, max_epochs=4,
                patience=10, batch_size=4, accumulation_steps=2, seed=0)
    base.update(kw)
    return teacher_run_config(**base)


def tiny_student_cfg(**kw):
    base = dict(model=TINY_STUDENT, head_lr=3e-3, backbone_lr=3e-3, min_lr=1e-5, warmup_epochs=1, max_epochs=3,
                patience=10, batch_size=4, accumulation_steps=2, seed=0)
    base.update(kw)
    return student_run_config(**base)


# -- confusion / metrics -----------------------------------------------------

def test_confusion_hand_count():
    cm = confusion([0, 1, 1], [0, 1, 2], 3)
    assert cm.tolist() == [[1, 0, 0], [0, 1, 0], [0, 1, 0]]
    assert cm.total == 3


def test_confusion_perfect_is_diagonal():
    labels = np.array([0, 1, 2, 2, 1, 0, 0])
    cm = confusion(labels, labels, 3)
    assert np.array_equal(cm.counts, np.diag(np.bincount(labels, minlength=3)))


def test_confusion_rejects_out_of_range():
    with pytest.raises(ValueError, match="prediction"):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(ValueError, match="label"):
        confusion([0, 1], [-1, 1], 3)


def test_confusion_merge_by_sum():
    a, b = confusion([0, 1], [0, 0], 2), confusion([1, 1], [1, 0], 2)
    assert (a + b).tolist() == confusion([0, 1, 1, 1], [0, 0, 1, 0], 2).tolist()


def test_metrics_perfect():
    m = metrics_from_confusion(ConfusionMatrix(np.diag([3, 4, 5])))
    assert (m.accuracy, m.sensitivity, m.specificity) == (1.0, 1.0, 1.0)


def test_metrics_match_oracle_on_hand_matrix():
    cm = [[5, 1, 0], [2, 6, 0], [0, 1, 5]]
    m = metrics_from_confusion(ConfusionMatrix(cm))
    acc, sens, spec = oracles.one_vs_rest_metrics(cm)
    assert m.exact == {"accuracy": acc, "sensitivity": sens, "specificity": spec}
    assert m.accuracy == float(Fraction(16, 20))


def test_metrics_single_predicted_class():
    cm = [[4, 0, 0], [4, 0, 0], [4, 0, 0]]
    m = metrics_from_confusion(ConfusionMatrix(cm))
    assert m.exact["accuracy"] == Fraction(1, 3)
    assert m.per_class_specificity == (0.0, 1.0, 1.0)
    assert m.per_class_sensitivity == (1.0, 0.0, 0.0)


def test_metrics_against_oracle_on_random_matrices():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        cm = rng.integers(0, 12, size=(k, k))
        cm[rng.random((k, k)) < 0.2] = 0
        if cm.sum() == 0:
            cm[0, 0] = 1
        m = metrics_from_confusion(ConfusionMatrix(cm))
        acc, sens, spec = oracles.one_vs_rest_metrics(cm.tolist())
        assert m.exact["accuracy"] == acc
        assert m.exact["sensitivity"] == sens
        assert m.exact["specificity"] == spec


def test_metrics_degenerate_cases():
    m = metrics_from_confusion(ConfusionMatrix([[3, 1, 0], [0, 2, 0], [0, 0, 0]]))
    assert m.excluded_sensitivity == (2,)
    assert m.degenerate
    assert m.per_class_sensitivity[2] is None
    assert m.sensitivity == pytest.approx((0.75 + 1.0) / 2)
    # every sample of one class: other classes have no negatives to spare
    m = metrics_from_confusion(ConfusionMatrix([[4, 0], [0, 0]]))
    assert m.excluded_sensitivity == (1,)
    assert m.excluded_specificity == (0,)
    with pytest.raises(ValueError):
        metrics_from_confusion(ConfusionMatrix(np.zeros((3, 3), dtype=int)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=60))
def test_confusion_total_and_accuracy(pairs):
    preds, labels = zip(*pairs)
    cm = confusion(preds, labels, 3)
    assert cm.total == len(pairs)
    assert metrics_from_confusion(cm).exact["accuracy"] == Fraction(sum(p == t for p, t in pairs), len(pairs))


# -- evaluation --------------------------------------------------------------

class _Constant(Module):
    """Returns the same logits for every input and counts forwarded samples."""

    kind = "constant"

    def __init__(self, logits):
        super().__init__()
        self.logits = np.asarray(logits, dtype=np.float32)
        self.seen = 0

    def forward(self, x):
        self.seen += x.shape[0]
        return Tensor(np.tile(self.logits, (x.shape[0], 1)))


def test_tta_constant_model_matches_single_view(tiny_data):
    manifest, split = tiny_data
    model = _Constant([0.1, 2.0, -1.0])
    idx = split.test_idx
    single = evaluate(model, manifest, idx, teacher_profile(), batch_size=7)
    model.seen = 0
    tta = tta_evaluate(model, manifest, idx, teacher_profile(), batch_size=7)
    assert model.seen == 5 * len(idx)
    assert tta.confusion.tolist() == single.confusion.tolist()
    assert tta.metrics == single.metrics
    again = tta_evaluate(model, manifest, idx, teacher_profile(), batch_size=7)
    assert np.array_equal(again.logits, tta.logits)


def test_tta_deterministic_with_real_model(tiny_data):
    manifest, split = tiny_data
    model = build_teacher(TINY_TEACHER)
    a = tta_evaluate(model, manifest, split.test_idx, teacher_profile())
    b = tta_evaluate(model, manifest, split.test_idx, teacher_profile(), batch_size=3)
    np.testing.assert_allclose(a.logits, b.logits, atol=1e-5)
    assert a.confusion.tolist() == b.confusion.tolist()


def test_eval_batch_size_invariance(tiny_data):
    manifest, _ = tiny_data
    images = [read_pgm(manifest.resolve(rec)) for rec in manifest.records[:8]]
    model = build_teacher(TINY_TEACHER)
    a = predict_logits(model, images, teacher_profile(), batch_size=1)
    b = predict_logits(model, images, teacher_profile(), batch_size=8)
    np.testing.assert_allclose(a, b, atol=1e-5)


# -- training ----------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_teacher(tiny_data, tmp_path_factory):
    manifest, split = tiny_data
    out = tmp_path_factory.mktemp("teacher")
    return train_teacher(tiny_teacher_cfg(), manifest, split, out), out


def test_teacher_run_outputs(trained_teacher):
    res, out = trained_teacher
    names = {p.name for p in out.iterdir()}
    assert {"teacher.kdoc", "teacher_best.kdoc", "teacher_swa.kdoc", "teacher_report.json", "teacher_report.txt",
            "teacher_timing.json"} <= names
    rep = res.report
    assert len(rep.history) == 4
    assert rep.final["swa_snapshots"] == 1  # averaging starts at floor(0.75 * 4) = 3
    assert rep.final["primary"] in ("best", "swa")
    assert (out / "teacher.kdoc").read_bytes() == (out / f"teacher_{rep.final['primary']}.kdoc").read_bytes()
    assert "wall_clock_seconds" in json.loads((out / "teacher_timing.json").read_text())
    assert "wall_clock" not in (out / "teacher_report.json").read_text()
    assert "test" in rep.final and rep.final["tta"] is True


def test_lr_history_matches_schedule(trained_teacher):
    res, _ = trained_teacher
    cfg = tiny_teacher_cfg()
    sched = cfg.schedule()
    for h in res.report.history:
        assert h["lr"] == lr_at(sched, h["epoch"])
        head, backbone = h["group_lrs"]
        assert head == pytest.approx(lr_at(sched, h["epoch"]), rel=1e-12)
        assert head / backbone == pytest.approx(cfg.head_lr / cfg.backbone_lr, rel=1e-12)


def test_teacher_checkpoint_reloads(trained_teacher, tiny_data):
    res, out = trained_teacher
    manifest, split = tiny_data
    model = load_checkpoint(out / "teacher.kdoc")
    ev = evaluate(model, manifest, split.val_idx, teacher_profile())
    assert ev.metrics.accuracy == pytest.approx(res.report.final["primary_val_accuracy"])


def test_distillation_contracts(trained_teacher, tiny_data, tmp_path):
    _, tdir = trained_teacher
    manifest, split = tiny_data
    before = (tdir / "teacher.kdoc").read_bytes()
    dcfg = DistillRunConfig(tiny_student_cfg(), DistillParams(4.0, 0.7, 0.3), str(tdir / "teacher.kdoc"))
    res = distill_student(dcfg, manifest, split, tmp_path)
    rep = res.report
    assert rep.teacher["unchanged"] and rep.teacher["state_hash_before"] == rep.teacher["state_hash_after"]
    assert rep.teacher["checkpoint"] == "teacher.kdoc"
    assert (tdir / "teacher.kdoc").read_bytes() == before
    assert len(rep.steps) == 3 * -(-len(split.train_idx) // 4)
    for s in rep.steps:
        assert s["total"] == 0.3 * s["ce"] + 0.7 * 16.0 * s["kl"]
        assert s["kl"] >= 0.0
    assert "student_swa" not in rep.checkpoints
    assert load_checkpoint(res.checkpoint).kind == "student"


def test_distillation_class_mismatch(trained_teacher, tiny_data, tmp_path):
    _, tdir = trained_teacher
    manifest, split = tiny_data
    cfg = tiny_student_cfg(model=StudentConfig(block_counts=(1, 1, 1), widths=(4, 8, 8), stem_width=4,
                                               num_classes=4))
    with pytest.raises(TrainingError, match="class count"):
        distill_student(DistillRunConfig(cfg, DistillParams(), str(tdir / "teacher.kdoc")), manifest, split, tmp_path)


def test_empty_split_rejected(tiny_data, tmp_path):
    manifest, split = tiny_data
    empty = SplitPlan(split.train_patients + split.val_patients, (), split.test_patients).with_indices(manifest)
    with pytest.raises(TrainingError, match="empty"):
        train_teacher(tiny_teacher_cfg(), manifest, empty, tmp_path)


def test_nonfinite_loss_aborts_with_last_good(tiny_data, tmp_path, monkeypatch):
    manifest, split = tiny_data
    real = training_mod.focal_loss
    calls = {"n": 0}

    def poisoned(logits, labels, params):
        calls["n"] += 1
        loss = real(logits, labels, params)
        if calls["n"] > 12:
            return loss * float("nan")
        return loss

    monkeypatch.setattr(training_mod, "focal_loss", poisoned)
    with pytest.raises(NonFiniteError, match="last good weights"):
        train_teacher(tiny_teacher_cfg(), manifest, split, tmp_path)
    assert (tmp_path / "teacher_last_good.kdoc").exists()
    report = json.loads((tmp_path / "teacher_report.json").read_text())
    per_epoch = -(-len(split.train_idx) // 4)
    assert report["status"].startswith(f"aborted at epoch {12 // per_epoch}")
    load_checkpoint(tmp_path / "teacher_last_good.kdoc")


def test_reports_and_checkpoints_are_byte_identical(tiny_data, tmp_path):
    manifest, split = tiny_data
    cfg = tiny_teacher_cfg(max_epochs=2, swa=False)
    for name in ("a", "b"):
        train_teacher(cfg, manifest, split, tmp_path / name)
    for f in ("teacher_report.json", "teacher_report.txt", "teacher.kdoc", "teacher_best.kdoc"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- reporting, cross-validation, ablation ----------------------------------

def test_format_mean_std():
    assert format_mean_std([0.9, 0.9, 0.9]) == "90.00 ± 0.00"
    assert format_mean_std([0.9, 0.95]) == "92.50 ± 2.50"
    assert format_mean_std([0.926], decimals=1) == "92.6 ± 0.0"


def test_cross_validate_folds_and_summary(tiny_data, tmp_path):
    manifest, _ = tiny_data
    rep = cross_validate(tiny_teacher_cfg(max_epochs=2, tta=False), manifest, 2, tmp_path, seed=5)
    assert [f["fold"] for f in rep.folds] == [0, 1]
    assert rep.status == "complete"
    accs = [f["test"]["accuracy"] for f in rep.folds]
    assert rep.summary["teacher_accuracy"] == format_mean_std(accs)
    assert rep.summary["teacher_accuracy_std"] == pytest.approx(float(np.std(accs)))
    val_sets = [set(f["val_patients"]) for f in rep.folds]
    assert not val_sets[0] & val_sets[1]
    assert set().union(*val_sets) == set(manifest.patients())
    assert (tmp_path / "cv_report.json").exists()
    with pytest.raises(ConfigError):
        cross_validate(tiny_teacher_cfg(), manifest, 1, tmp_path)


def test_cross_validate_failure_keeps_partial_report(tiny_data, tmp_path, monkeypatch):
    manifest, _ = tiny_data
    from kdoct.engine import experiments

    real = experiments.train_teacher
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise TrainingError("simulated failure")
        return real(*a, **kw)

    monkeypatch.setattr(experiments, "train_teacher", flaky)
    with pytest.raises(KDOCTError):
        cross_validate(tiny_teacher_cfg(max_epochs=1, warmup_epochs=0, tta=False, swa=False), manifest, 3, tmp_path)
    report = json.loads((tmp_path / "cv_report.json").read_text())
    assert len(report["folds"]) == 1
    assert report["status"].startswith("failed at fold 1")


def test_ablation_matrix_rows():
    assert [r for r, _ in ablation_matrix(["no_focal", "no_swa"])] == ["full", "no_swa", "no_focal", "all_off"]
    assert [r for r, _ in ablation_matrix(["no_swa"])] == ["full", "no_swa"]
    with pytest.raises(ConfigError):
        ablation_matrix(["no_dropout"])
    with pytest.raises(ConfigError):
        ablation_matrix(["no_swa", "no_swa"])


def test_apply_toggles_changes_only_the_named_component():
    cfg = tiny_teacher_cfg()
    assert apply_toggles(cfg, ("no_heavy_aug",)) == cfg.replace(heavy_aug=False)
    assert apply_toggles(cfg, ("no_swa",)) == cfg.replace(swa=False)
    assert apply_toggles(cfg, ("no_focal",)) == cfg.replace(loss="ce", class_weighting="none")
    assert apply_toggles(cfg, ("no_kd",)) == cfg


def test_run_ablation_shared_split(tiny_data, tmp_path):
    manifest, split = tiny_data
    cfg = tiny_teacher_cfg(max_epochs=2, tta=False)
    rep = run_ablation(["no_swa", "no_focal"], cfg, manifest, split, tmp_path)
    assert [r["row"] for r in rep.rows] == ["full", "no_swa", "no_focal", "all_off"]
    assert {r["split_hash"] for r in rep.rows} == {split.hash}
    text = (tmp_path / "ablation_report.txt").read_text()
    assert "all_off" in text and "test_accuracy" in text
    with pytest.raises(ConfigError, match="no_kd"):
        run_ablation(["no_kd"], cfg, manifest, split, tmp_path / "x")


def test_ablation_no_kd_uses_hard_labels_only(trained_teacher, tiny_data, tmp_path):
    manifest, split = tiny_data
    dcfg = DistillRunConfig(tiny_student_cfg(max_epochs=1, warmup_epochs=0), DistillParams(), "")
    rep = run_ablation(["no_kd"], tiny_teacher_cfg(max_epochs=1, warmup_epochs=0, tta=False, swa=False), manifest, split, tmp_path,
                       distill=dcfg)
    assert [r["row"] for r in rep.rows] == ["full", "no_kd"]
    steps = json.loads((tmp_path / "no_kd" / "student_report.json").read_text())["steps"]
    assert all(s["total"] == s["ce"] for s in steps)
