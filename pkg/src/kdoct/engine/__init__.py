from .configs import DistillRunConfig, TrainRunConfig, student_run_config, teacher_run_config
from .experiments import ablation_matrix, apply_toggles, cross_validate, run_ablation, summarize_folds
from .evaluation import EvalResult, evaluate, predict_logits, tta_evaluate
from .metrics import ConfusionMatrix, Metrics, confusion, metrics_from_confusion
from .report import RunReport, format_mean_std, mean_std
from .training import TrainResult, distill_student, train_teacher

__all__ = [
    "ConfusionMatrix",
    "DistillRunConfig",
    "EvalResult",
    "Metrics",
    "RunReport",
    "TrainResult",
    "TrainRunConfig",
    "ablation_matrix",
    "apply_toggles",
    "confusion",
    "cross_validate",
    "distill_student",
    "evaluate",
    "format_mean_std",
    "mean_std",
    "metrics_from_confusion",
    "predict_logits",
    "run_ablation",
    "summarize_folds",
    "student_run_config",
    "teacher_run_config",
    "train_teacher",
    "tta_evaluate",
]
