"""Batched inference, single-view and test-time-augmented evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..augment import AugmentationProfile, tta_variants, val_pipeline
from ..autodiff import Tensor, no_grad
from ..autodiff.functional import log_softmax_array
from ..data import DatasetManifest, ImageCache
from .metrics import ConfusionMatrix, Metrics, confusion, metrics_from_confusion

TTA_VIEWS = 5


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    metrics: Metrics
    loss: float
    logits: np.ndarray
    tta: bool = False


def forward_batches(model, inputs: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a stack of normalized inputs."""
    model.eval()
    out = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            out.append(model(Tensor(inputs[start:start + batch_size])).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, 0), dtype=np.float32)


def predict_logits(model, images, profile: AugmentationProfile, batch_size: int = 64,
                   tta: bool = False) -> np.ndarray:
    """Per-image logits; with ``tta`` the 5 views' raw logits are averaged."""
    if not tta:
        return forward_batches(model, np.stack([val_pipeline(img, profile) for img in images]), batch_size)
    per_chunk = max(1, batch_size // TTA_VIEWS)
    out = []
    for start in range(0, len(images), per_chunk):
        chunk = images[start:start + per_chunk]
        views = np.stack([v for img in chunk for v in tta_variants(img, profile)])
        logits = forward_batches(model, views, len(views))
        out.append(logits.reshape(len(chunk), TTA_VIEWS, -1).mean(axis=1))
    return np.concatenate(out, axis=0)


def _mean_ce(logits: np.ndarray, labels: np.ndarray) -> float:
    logp = log_softmax_array(logits.astype(np.float64))
    return float(-logp[np.arange(len(labels)), labels].mean())


def evaluate_images(model, images, labels, profile: AugmentationProfile, num_classes: int,
                    batch_size: int = 64, tta: bool = False) -> EvalResult:
    labels = np.asarray(labels, dtype=np.int64)
    logits = predict_logits(model, images, profile, batch_size, tta)
    cm = confusion(logits.argmax(axis=1), labels, num_classes)
    return EvalResult(cm, metrics_from_confusion(cm), _mean_ce(logits, labels), logits, tta)


def evaluate(model, manifest: DatasetManifest, indices, profile: AugmentationProfile,
             cache: ImageCache | None = None, batch_size: int = 64, tta: bool = False) -> EvalResult:
    cache = cache or ImageCache(manifest)
    recs = [manifest.records[i] for i in indices]
    if not recs:
        raise ValueError("nothing to evaluate: empty index list")
    return evaluate_images(model, [cache.load(r) for r in recs], [r.label for r in recs], profile,
                           manifest.num_classes, batch_size, tta)


def tta_evaluate(model, manifest: DatasetManifest, indices, profile: AugmentationProfile,
                 cache: ImageCache | None = None, batch_size: int = 64) -> EvalResult:
    return evaluate(model, manifest, indices, profile, cache, batch_size, tta=True)
