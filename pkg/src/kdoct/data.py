"""Manifests, PGM images, a synthetic OCT-like generator, patient-level
splits and deterministic batching."""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, FormatError

DEFAULT_CLASSES = ("normal", "drusen", "cnv")
FOURTH_CLASS = "dme"


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: int
    patient_id: str


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    class_names: tuple
    root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.class_names:
            raise DataError("manifest declares no classes")
        seen = set()
        for r in self.records:
            if r.image_path in seen:
                raise DataError(f"duplicate image path {r.image_path!r}")
            seen.add(r.image_path)
            if not 0 <= r.label < len(self.class_names):
                raise DataError(f"label {r.label} out of range for {len(self.class_names)} classes")
            if not r.patient_id:
                raise DataError(f"record {r.image_path!r} has an empty patient id")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def patients(self) -> list[str]:
        return sorted({r.patient_id for r in self.records})

    def patient_classes(self) -> "OrderedDict[str, int]":
        """Majority label of each patient's scans (lowest label on ties)."""
        votes: dict[str, Counter] = {}
        for r in self.records:
            votes.setdefault(r.patient_id, Counter())[r.label] += 1
        out = OrderedDict()
        for pid in sorted(votes):
            c = votes[pid]
            out[pid] = min(c, key=lambda lab: (-c[lab], lab))
        return out

    def resolve(self, record: SampleRecord) -> Path:
        p = Path(record.image_path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def subset(self, indices) -> list[SampleRecord]:
        return [self.records[i] for i in indices]


def manifest_text(manifest: DatasetManifest) -> str:
    lines = ["classes:" + ",".join(manifest.class_names)]
    lines += [f"{r.image_path},{manifest.class_names[r.label]},{r.patient_id}" for r in manifest.records]
    return "\n".join(lines) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    from .models.checkpoint import atomic_write_bytes

    for r in manifest.records:
        if "," in r.image_path or "," in r.patient_id:
            raise DataError(f"commas are not allowed in manifest fields: {r.image_path!r}")
    atomic_write_bytes(path, manifest_text(manifest).encode("utf-8"))


def parse_manifest(text: str, source: str = "<manifest>", root: Path | None = None) -> DatasetManifest:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataError(f"{source}: no records (empty file)")
    head = lines[0].strip()
    if not head.startswith("classes:"):
        raise FormatError(f"{source}:1: first line must be 'classes:<names>'")
    names = [c.strip() for c in head[len("classes:"):].split(",")]
    if not names or any(not c for c in names) or len(set(names)) != len(names):
        raise FormatError(f"{source}:1: class list must be nonempty, unique names")
    index = {c: i for i, c in enumerate(names)}
    records, seen = [], {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or not all(parts):
            raise FormatError(f"{source}:{lineno}: expected 'path,label_name,patient_id', got {line!r}")
        path, label, pid = parts
        if label not in index:
            raise DataError(f"{source}:{lineno}: unknown class name {label!r}")
        if path in seen:
            raise DataError(f"{source}:{lineno}: duplicate path {path!r} (first on line {seen[path]})")
        seen[path] = lineno
        records.append(SampleRecord(path, index[label], pid))
    if not records:
        raise DataError(f"{source}: no records")
    return DatasetManifest(tuple(records), tuple(names), root)


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest; image paths are resolved relative to its directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    return parse_manifest(text, str(path), path.parent)


# -- PGM ---------------------------------------------------------------------

def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2 or img.dtype != np.uint8:
        raise FormatError(f"PGM needs a 2-D uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    from .models.checkpoint import atomic_write_bytes

    atomic_write_bytes(path, encode_pgm(image))


def decode_pgm(data: bytes, source: str = "<pgm>") -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{source}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{source}: malformed PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError(f"{source}: unsupported PGM geometry {w}x{h} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    payload = data[pos:pos + w * h]
    if len(payload) != w * h:
        raise FormatError(f"{source}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc.strerror}") from None
    return decode_pgm(data, str(path))


class ImageCache:
    """Lazy image loader keyed by resolved path."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._cache: dict[str, np.ndarray] = {}

    def load(self, record: SampleRecord) -> np.ndarray:
        key = record.image_path
        if key not in self._cache:
            self._cache[key] = read_pgm(self.manifest.resolve(record))
        return self._cache[key]

    def put(self, record: SampleRecord, image: np.ndarray) -> None:
        self._cache[record.image_path] = image


def in_memory_dataset(images, labels, groups=None, class_names=None) -> tuple[DatasetManifest, ImageCache]:
    """Manifest plus a prefilled cache for images that never touch the disk.

    Without ``groups`` every image counts as its own patient.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images for {len(labels)} labels")
    if groups is None:
        groups = [f"s{i:06d}" for i in range(len(labels))]
    elif len(groups) != len(labels):
        raise DataError(f"{len(groups)} group ids for {len(labels)} labels")
    k = int(labels.max()) + 1 if labels.size else 0
    names = tuple(class_names) if class_names is not None else tuple(f"class{c}" for c in range(k))
    records = [SampleRecord(f"mem/{i:06d}", int(lab), str(g)) for i, (lab, g) in enumerate(zip(labels, groups))]
    manifest = DatasetManifest(records, names)
    cache = ImageCache(manifest)
    for rec, img in zip(records, images):
        cache.put(rec, np.asarray(img))
    return manifest, cache


# -- synthetic generator -----------------------------------------------------

def _even_counts(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _patient_style(rng: np.random.Generator, size: int) -> dict:
    return {
        "base": rng.uniform(0.45, 0.6) * size,
        "amp": rng.uniform(0.02, 0.05) * size,
        "period": rng.uniform(1.2, 2.5) * size,
        "phase": rng.uniform(0, 2 * math.pi),
        "thickness": rng.uniform(0.22, 0.3) * size,
        "gain": rng.uniform(0.85, 1.1),
        "background": rng.uniform(12, 22),
    }


def synth_scan(label: int, style: dict, size: int, rng: np.random.Generator) -> np.ndarray:
    """One grayscale B-scan-like image for class ``label``.

    Every class shares layered retinal bands; drusen add small bright
    bumps on the deepest band, CNV adds a large irregular bright mass and
    the optional fourth class adds dark fluid pockets inside the retina.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = size
    shift = rng.normal(0, 0.02 * s)
    curve = style["base"] + shift + style["amp"] * np.sin(2 * math.pi * xx / style["period"] + style["phase"])
    top = curve - style["thickness"]
    img = np.full((s, s), style["background"])
    band_w = max(0.6, 0.025 * s)
    img += 55 * np.exp(-((yy - top) / band_w) ** 2)                      # inner boundary
    img += 30 * ((yy > top) & (yy < curve)) * (0.6 + 0.4 * np.cos(6 * (yy - top) / style["thickness"]))
    rpe = curve
    if label == 1:
        for _ in range(int(rng.integers(4, 7))):
            cx = rng.uniform(0.15, 0.85) * s
            height = rng.uniform(0.1, 0.16) * s
            width = rng.uniform(0.06, 0.1) * s
            rpe = rpe - height * np.exp(-((xx - cx) / width) ** 2)
        img += 100 * ((yy > rpe - band_w) & (yy < curve))                  # material under the bumps
    img += 120 * np.exp(-((yy - rpe) / (1.2 * band_w)) ** 2)                # deepest bright band
    if label == 2:
        cx = rng.uniform(0.3, 0.7) * s
        cy = curve[0, int(cx)] - rng.uniform(0.05, 0.12) * s
        mass = np.zeros_like(img)
        for _ in range(5):
            ox, oy = rng.normal(0, 0.07 * s, 2)
            r = rng.uniform(0.08, 0.13) * s
            mass += np.exp(-(((xx - cx - ox) ** 2 + (yy - cy - oy) ** 2) / (r * r)))
        img += 110 * np.clip(mass, 0, 1.5)
    if label == 3:
        for _ in range(int(rng.integers(2, 4))):
            cx = rng.uniform(0.2, 0.8) * s
            cy = curve[0, int(cx)] - 0.5 * style["thickness"]
            r = rng.uniform(0.05, 0.09) * s
            img -= 40 * np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (r * r)))
    below = yy > curve + 2 * band_w
    img += 15 * below * np.exp(-(yy - curve) / (0.2 * s))
    img *= style["gain"]
    img *= rng.gamma(8.0, 1 / 8.0, size=img.shape) ** 0.5                   # speckle
    img += rng.normal(0, 6, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(out_dir, per_class_counts=(200, 200, 200), patients_per_class=(20, 20, 20),
                   image_size: int = 32, seed: int = 0, class_names=None) -> DatasetManifest:
    """Write a synthetic PGM dataset plus ``manifest.txt`` under ``out_dir``."""
    counts = [int(c) for c in per_class_counts]
    patients = [int(p) for p in patients_per_class]
    if class_names is None:
        class_names = DEFAULT_CLASSES + ((FOURTH_CLASS,) if len(counts) == 4 else ())
    class_names = tuple(class_names)
    if not len(counts) == len(patients) == len(class_names):
        raise DataError("per-class counts, patient counts and class names must have equal length")
    if len(class_names) not in (3, 4):
        raise DataError("the generator supports 3 classes or 3 plus a fourth fluid class")
    for c, p, name in zip(counts, patients, class_names):
        if not c >= p >= 1:
            raise DataError(f"class {name!r}: need scans >= patients >= 1, got {c} scans for {p} patients")
    if image_size < 8:
        raise DataError("image_size must be at least 8")

    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None

    records = []
    for label, (count, n_pat) in enumerate(zip(counts, patients)):
        for pidx, n_scans in enumerate(_even_counts(count, n_pat)):
            pid = f"p{label}{pidx:04d}"
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), label, pidx]))
            style = _patient_style(rng, image_size)
            for j in range(n_scans):
                rel = f"images/{class_names[label]}_{pid}_{j:03d}.pgm"
                write_pgm(out / rel, synth_scan(label, style, image_size, rng))
                records.append(SampleRecord(rel, label, pid))
    manifest = DatasetManifest(tuple(records), class_names, out)
    save_manifest(manifest, out / "manifest.txt")
    return manifest


def synthetic_metadata(patients_per_class=(120, 160, 161), scans_per_class=(5667, 3742, 3240),
                       seed: int = 0, class_names=DEFAULT_CLASSES) -> DatasetManifest:
    """Image-free manifest with the given patient and scan counts.

    Scans per patient vary (multinomial over gamma-distributed weights) with
    at least one scan each, so scan-level and patient-level fractions differ.
    """
    rng = np.random.default_rng(seed)
    records = []
    for label, (n_pat, n_scan) in enumerate(zip(patients_per_class, scans_per_class)):
        weights = rng.gamma(4.0, 1.0, n_pat)
        extra = rng.multinomial(n_scan - n_pat, weights / weights.sum())
        for pidx, k in enumerate(extra + 1):
            pid = f"p{label}{pidx:04d}"
            records.extend(SampleRecord(f"{pid}/{j}.pgm", label, pid) for j in range(k))
    return DatasetManifest(tuple(records), tuple(class_names))


# -- patient-level splits ----------------------------------------------------

def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def _indices_for(manifest: DatasetManifest, patients) -> tuple:
    keep = set(patients)
    return tuple(i for i, r in enumerate(manifest.records) if r.patient_id in keep)


@dataclass(frozen=True)
class SplitPlan:
    train_patients: tuple
    val_patients: tuple
    test_patients: tuple
    train_idx: tuple = ()
    val_idx: tuple = ()
    test_idx: tuple = ()
    seed: int = 0

    def __post_init__(self):
        for name in ("train_patients", "val_patients", "test_patients"):
            object.__setattr__(self, name, tuple(sorted(getattr(self, name))))
        a, b, c = map(set, (self.train_patients, self.val_patients, self.test_patients))
        if a & b or a & c or b & c:
            raise DataError(f"patient sets overlap: {sorted((a & b) | (a & c) | (b & c))[:3]}")

    def payload(self) -> dict:
        return {"seed": self.seed, "train": list(self.train_patients), "val": list(self.val_patients),
                "test": list(self.test_patients)}

    @property
    def hash(self) -> str:
        return _hash_json(self.payload())

    def with_indices(self, manifest: DatasetManifest) -> "SplitPlan":
        known = set(manifest.patients())
        plan_patients = set(self.train_patients) | set(self.val_patients) | set(self.test_patients)
        if plan_patients != known:
            raise DataError("split plan does not cover exactly the manifest's patients")
        return SplitPlan(self.train_patients, self.val_patients, self.test_patients,
                         _indices_for(manifest, self.train_patients), _indices_for(manifest, self.val_patients),
                         _indices_for(manifest, self.test_patients), self.seed)

    def to_json(self) -> str:
        d = self.payload()
        d["hash"] = self.hash
        return json.dumps(d, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, manifest: DatasetManifest | None = None) -> "SplitPlan":
        try:
            d = json.loads(text)
            plan = cls(d["train"], d["val"], d["test"], seed=int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed split file: {exc}") from None
        if "hash" in d and d["hash"] != plan.hash:
            raise FormatError("split file hash does not match its contents")
        return plan.with_indices(manifest) if manifest is not None else plan


def _group_patients(manifest: DatasetManifest) -> list[list[str]]:
    by_class: list[list[str]] = [[] for _ in manifest.class_names]
    for pid, label in manifest.patient_classes().items():
        by_class[label].append(pid)
    return by_class


def patient_stratified_split(manifest: DatasetManifest, test_fraction: float = 0.2,
                             val_fraction_of_remainder: float = 0.2, seed: int = 0) -> SplitPlan:
    """Assign whole patients to train/val/test, stratified by patient class.

    Per class, patients are shuffled; one patient seeds each split, then each
    next patient goes to the split furthest below its target count.
    """
    if not 0 < test_fraction < 1 or not 0 < val_fraction_of_remainder < 1:
        raise ValueError("split fractions must lie in (0, 1)")
    targets = (test_fraction, (1 - test_fraction) * val_fraction_of_remainder,
               (1 - test_fraction) * (1 - val_fraction_of_remainder))
    rng = np.random.default_rng(seed)
    assigned: list[list[str]] = [[], [], []]  # test, val, train
    for label, pids in enumerate(_group_patients(manifest)):
        if len(pids) < 3:
            raise DataError(
                f"class {manifest.class_names[label]!r} has {len(pids)} patients; need at least 3 for train/val/test"
            )
        order = [pids[i] for i in rng.permutation(len(pids))]
        n = len(order)
        counts = [0, 0, 0]
        for k, pid in enumerate(order):
            if k < 3:
                s = k
            else:
                deficits = [targets[j] * n - counts[j] for j in range(3)]
                s = max(range(3), key=lambda j: (deficits[j], -j))
            counts[s] += 1
            assigned[s].append(pid)
    plan = SplitPlan(assigned[2], assigned[1], assigned[0], seed=seed)
    return plan.with_indices(manifest)


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple(tuple(sorted(f)) for f in self.folds))
        seen: dict[str, int] = {}
        for i, f in enumerate(self.folds):
            for pid in f:
                if pid in seen:
                    raise DataError(f"patient {pid!r} appears in folds {seen[pid]} and {i}")
                seen[pid] = i

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def hash(self) -> str:
        return _hash_json({"seed": self.seed, "folds": [list(f) for f in self.folds]})

    def split(self, i: int, manifest: DatasetManifest) -> SplitPlan:
        """Fold ``i`` is held out for both validation and testing."""
        if not 0 <= i < self.k:
            raise IndexError(f"fold {i} out of range for k={self.k}")
        train = [p for j, f in enumerate(self.folds) if j != i for p in f]
        held = self.folds[i]
        # the held-out records serve as test set too; test_patients stays empty to keep sets disjoint
        return SplitPlan(train, held, (), _indices_for(manifest, train), _indices_for(manifest, held),
                         _indices_for(manifest, held), self.seed)

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "folds": [list(f) for f in self.folds], "hash": self.hash},
                          sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        try:
            d = json.loads(text)
            plan = cls(d["folds"], int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed fold file: {exc}") from None
        if "hash" in d and d["hash"] != plan.hash:
            raise FormatError("fold file hash does not match its contents")
        return plan


def patient_kfold(manifest: DatasetManifest, k: int, seed: int = 0) -> FoldPlan:
    """Class-stratified partition of patients into ``k`` folds.

    Each class deals its shuffled patients round-robin, starting where the
    previous class stopped so fold sizes stay balanced overall.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    rng = np.random.default_rng(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    offset = 0
    for label, pids in enumerate(_group_patients(manifest)):
        if len(pids) < k:
            raise DataError(f"class {manifest.class_names[label]!r} has {len(pids)} patients, fewer than k={k}")
        order = [pids[i] for i in rng.permutation(len(pids))]
        for j, pid in enumerate(order):
            folds[(offset + j) % k].append(pid)
        offset = (offset + len(order)) % k
    return FoldPlan(tuple(folds), seed)


# -- batching ----------------------------------------------------------------

@dataclass
class Batch:
    indices: np.ndarray
    images: list = field(default_factory=list)
    labels: np.ndarray = None
    patient_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.indices)


def epoch_order(n: int, shuffle: bool, seed: int, epoch: int) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)])).permutation(n)


def batch_iterator(manifest: DatasetManifest, indices: Sequence[int], batch_size: int, shuffle: bool,
                   seed: int = 0, epoch: int = 0, cache: ImageCache | None = None) -> Iterator[Batch]:
    """Yield batches over ``indices``; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    indices = np.asarray(indices, dtype=np.int64)
    order = indices[epoch_order(len(indices), shuffle, seed, epoch)]
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        recs = [manifest.records[i] for i in chunk]
        images = [cache.load(r) for r in recs] if cache is not None else []
        yield Batch(chunk, images, np.array([r.label for r in recs], dtype=np.int64), [r.patient_id for r in recs])


# -- separability sanity signal ----------------------------------------------

def shape_features(image: np.ndarray, threshold: float = 0.35) -> np.ndarray:
    """Translation-tolerant intensity and layer-shape summary of one scan."""
    f = np.asarray(image, dtype=np.float64).reshape(image.shape[0], image.shape[1]) / 255.0
    quantiles = np.quantile(f, np.linspace(0.5, 1.0, 11))
    rows = np.sort(f.mean(axis=1))[::-1][:8]
    bright = f > threshold
    extras = [f.max(axis=0).std(), bright.sum(axis=1).max() / f.shape[1], bright.mean()]
    return np.concatenate([quantiles, rows, extras])


def separability_signal(manifest: DatasetManifest, split: SplitPlan, cache: ImageCache | None = None) -> float:
    """Validation accuracy of a linear model on hand-made features.

    A cheap, network-free check that the classes are separable; a training
    run that fails its accuracy target while this signal is high points at
    the training code rather than the data.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    cache = cache or ImageCache(manifest)
    feats = {i: shape_features(cache.load(manifest.records[i])) for i in (*split.train_idx, *split.val_idx)}
    labels = manifest.labels()
    tr, va = list(split.train_idx), list(split.val_idx)
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    clf.fit(np.array([feats[i] for i in tr]), labels[tr])
    return float(clf.score(np.array([feats[i] for i in va]), labels[va]))
