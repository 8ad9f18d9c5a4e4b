"""Run reports: a structured JSON file plus a plain-text rendering.

Reports hold only deterministic content so that two identical runs write
byte-identical files; wall-clock time goes to a separate timing file.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..models.checkpoint import atomic_write_bytes


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, Path):
        return str(obj)
    return obj


@dataclass
class RunReport:
    kind: str
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    split_hash: str = ""
    history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    folds: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    status: str = "complete"

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        lines = [f"run: {self.kind}", f"status: {self.status}"]
        if self.split_hash:
            lines.append(f"split: {self.split_hash}")
        if self.teacher:
            lines.append("teacher:")
            lines += [f"  {k} = {v}" for k, v in sorted(self.teacher.items())]
        if self.history:
            lines.append("")
            lines.append(f"{'epoch':>5} {'lr':>10} {'train_loss':>10} {'val_loss':>9} {'val_acc':>8} {'swa':>4}")
            for h in self.history:
                lines.append(f"{h['epoch']:>5} {h['lr']:>10.3e} {h['train_loss']:>10.4f} {h['val_loss']:>9.4f} "
                             f"{h['val_accuracy']:>8.4f} {'y' if h.get('swa_snapshot') else '-':>4}")
        if self.final:
            lines.append("")
            lines.append("final:")
            lines += _render_dict(self.final, "  ")
        if self.checkpoints:
            lines.append("")
            lines.append("checkpoints:")
            lines += [f"  {k} sha256={v}" for k, v in sorted(self.checkpoints.items())]
        if self.folds:
            lines.append("")
            lines.append(f"{'fold':>4} {'model':>8} {'accuracy':>9} {'sensitivity':>12} {'specificity':>12}")
            for f in self.folds:
                for key, model in (("test", "teacher"), ("student_test", "student")):
                    if key in f:
                        m = f[key]
                        lines.append(f"{f['fold']:>4} {model:>8} {m['accuracy']:>9.4f} {m['sensitivity']:>12.4f} "
                                     f"{m['specificity']:>12.4f}")
        if self.summary:
            lines.append("")
            lines.append("summary (mean ± std, percent):")
            lines += [f"  {k}: {v}" for k, v in sorted(self.summary.items())]
        if self.rows:
            lines.append("")
            lines.append(render_table(self.rows))
        if self.flags:
            lines.append("")
            lines += [f"flag: {f}" for f in self.flags]
        if self.config:
            lines.append("")
            lines.append("resolved config:")
            for k, v in sorted(flatten(self.config).items()):
                src = self.provenance.get(k)
                lines.append(f"  {k} = {v}" + (f"    # {src}" if src else ""))
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        jpath, tpath = out / f"{stem}.json", out / f"{stem}.txt"
        atomic_write_bytes(jpath, self.to_json().encode("utf-8"))
        atomic_write_bytes(tpath, self.to_text().encode("utf-8"))
        return jpath, tpath


def _render_dict(d: dict, indent: str) -> list[str]:
    out = []
    for k in sorted(d):
        v = d[k]
        if isinstance(v, dict):
            out.append(f"{indent}{k}:")
            out += _render_dict(v, indent + "  ")
        elif isinstance(v, float):
            out.append(f"{indent}{k} = {v:.6g}")
        else:
            out.append(f"{indent}{k} = {v}")
    return out


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def render_table(rows: list[dict]) -> str:
    cols = list(rows[0].keys())
    cells = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    head = "  ".join(c.ljust(w) for c, w in zip(cols, widths))
    body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join([head, "  ".join("-" * w for w in widths), *body])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(values, scale: float = 100.0, decimals: int = 2) -> str:
    m, s = mean_std(values)
    return f"{m * scale:.{decimals}f} ± {s * scale:.{decimals}f}"


def write_timing(out_dir, stem: str, seconds: float, extra: dict | None = None) -> Path:
    path = Path(out_dir) / f"{stem}_timing.json"
    payload = {"wall_clock_seconds": round(seconds, 3), **(extra or {})}
    atomic_write_bytes(path, (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8"))
    return path
