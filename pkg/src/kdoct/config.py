"""Flat ``section.key = value`` run configuration files.

A file maps onto one training run (teacher or student). Values from the file
can be overridden from the command line; every resolved key remembers where
its value came from so the run report can echo it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .augment import PROFILES, AugmentationProfile
from .engine.configs import DistillRunConfig, TrainRunConfig
from .errors import ConfigError
from .losses import DistillParams
from .models import StudentConfig, TeacherConfig

KINDS = ("teacher", "student")
PRESETS = ("teacher", "student", "teacher_desk", "student_desk")

# key -> (type name, required)
BASE_SCHEMA = {
    "run.kind": ("str", True),
    "run.seed": ("int", True),
    "augment.profile": ("str", True),
    "augment.heavy": ("bool", True),
    "loss.kind": ("str", True),
    "loss.gamma": ("float", False),
    "loss.class_weighting": ("str", False),
    "optim.base_lr": ("float", True),
    "optim.backbone_lr": ("float", False),
    "optim.weight_decay": ("float", True),
    "optim.min_lr": ("float", True),
    "schedule.warmup_epochs": ("int", True),
    "schedule.max_epochs": ("int", True),
    "train.batch_size": ("int", True),
    "train.accumulation_steps": ("int", True),
    "train.patience": ("int", True),
    "train.swa": ("bool", True),
    "eval.tta": ("bool", True),
    "eval.batch_size": ("int", False),
    "data.manifest": ("str", False),
    "data.split": ("str", False),
}
STUDENT_SCHEMA = {
    "distill.temperature": ("float", True),
    "distill.alpha_soft": ("float", True),
    "distill.beta_hard": ("float", True),
    "distill.teacher": ("str", False),
}


def _type_of(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, tuple):
        return "floats" if any(isinstance(v, float) for v in value) else "ints"
    return "str"


def _dataclass_schema(prefix: str, cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f"{prefix}.{f.name}"] = (_type_of(default), False)
    return out


def schema_for(kind: str) -> dict:
    if kind not in KINDS:
        raise ConfigError(f"run.kind must be one of {', '.join(KINDS)}, got {kind!r}")
    model_cls = TeacherConfig if kind == "teacher" else StudentConfig
    schema = dict(BASE_SCHEMA)
    schema.update(_dataclass_schema("model", model_cls))
    schema.update(_dataclass_schema("augment", AugmentationProfile))
    if kind == "student":
        schema.update(STUDENT_SCHEMA)
    return schema


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}
_EXPECTED = {"int": "an integer", "float": "a number", "bool": "true or false", "str": "text",
             "ints": "comma-separated integers", "floats": "comma-separated numbers"}


def convert(key: str, raw: str, type_name: str):
    text = raw.strip()
    try:
        if type_name == "int":
            return int(text)
        if type_name == "float":
            return float(text)
        if type_name == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if type_name == "ints":
            return tuple(int(v) for v in text.split(","))
        if type_name == "floats":
            return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected {_EXPECTED[type_name]}, got {text!r}") from None
    if not text:
        raise ConfigError(f"{key}: empty value")
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_lines(text: str, source: str) -> dict:
    """Raw ``key -> (value, origin)`` pairs; sections are written inline as ``section.key``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {body!r}")
        key, value = (s.strip() for s in body.split("=", 1))
        if key.count(".") != 1 or not all(key.split(".")):
            raise ConfigError(f"{source}:{lineno}: key {key!r} must look like section.key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = (value, f"{source}:{lineno}")
    return out


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, value = (s.strip() for s in item.split("=", 1))
    return key, value


@dataclass
class ResolvedConfig:
    values: dict
    provenance: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.values["run.kind"]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self):
        cls = TeacherConfig if self.kind == "teacher" else StudentConfig
        return _build(cls, self.section("model"), "model")

    def profile(self) -> AugmentationProfile:
        name = self.values["augment.profile"]
        if name not in PROFILES:
            raise ConfigError(f"augment.profile must be one of {', '.join(PROFILES)}, got {name!r}")
        overrides = {k: v for k, v in self.section("augment").items() if k not in ("profile", "heavy")}
        try:
            return PROFILES[name]().with_overrides(**overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"augment: {exc}") from None

    def train_config(self) -> TrainRunConfig:
        v = self.values
        base_lr = v["optim.base_lr"]
        kw = dict(model=self.model_config(), profile=self.profile(), heavy_aug=v["augment.heavy"],
                  loss=v["loss.kind"], head_lr=base_lr, backbone_lr=v.get("optim.backbone_lr", base_lr),
                  weight_decay=v["optim.weight_decay"], min_lr=v["optim.min_lr"],
                  warmup_epochs=v["schedule.warmup_epochs"], max_epochs=v["schedule.max_epochs"],
                  patience=v["train.patience"], batch_size=v["train.batch_size"],
                  accumulation_steps=v["train.accumulation_steps"], swa=v["train.swa"], tta=v["eval.tta"],
                  seed=v["run.seed"])
        for key, name in (("loss.gamma", "focal_gamma"), ("loss.class_weighting", "class_weighting"),
                          ("eval.batch_size", "eval_batch_size")):
            if key in v:
                kw[name] = v[key]
        try:
            return TrainRunConfig(**kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def distill_config(self, teacher_path=None) -> DistillRunConfig:
        if self.kind != "student":
            raise ConfigError("distillation needs a config with run.kind = student")
        params = _build(DistillParams, {k: v for k, v in self.section("distill").items() if k != "teacher"},
                        "distill")
        path = teacher_path or self.values.get("distill.teacher")
        if not path:
            raise ConfigError("no teacher checkpoint: pass --teacher or set distill.teacher")
        return DistillRunConfig(self.train_config(), params, str(path))

    def completed(self) -> "ResolvedConfig":
        """Copy with every optional key filled in from the built run config."""
        t = self.train_config()
        full = {"run.kind": self.kind, "run.seed": t.seed, "augment.profile": self.values["augment.profile"],
                "augment.heavy": t.heavy_aug, "loss.kind": t.loss, "loss.gamma": t.focal_gamma,
                "loss.class_weighting": t.class_weighting, "optim.base_lr": t.head_lr,
                "optim.backbone_lr": t.backbone_lr, "optim.weight_decay": t.weight_decay, "optim.min_lr": t.min_lr,
                "schedule.warmup_epochs": t.warmup_epochs, "schedule.max_epochs": t.max_epochs,
                "train.batch_size": t.batch_size, "train.accumulation_steps": t.accumulation_steps,
                "train.patience": t.patience, "train.swa": t.swa, "eval.tta": t.tta,
                "eval.batch_size": t.eval_batch_size}
        for name, value in dataclasses.asdict(t.model).items():
            full[f"model.{name}"] = tuple(value) if isinstance(value, list) else value
        for name, value in dataclasses.asdict(t.profile).items():
            full[f"augment.{name}"] = tuple(value) if isinstance(value, list) else value
        if self.kind == "student":
            params = _build(DistillParams, {k: v for k, v in self.section("distill").items() if k != "teacher"},
                            "distill")
            full.update({f"distill.{k}": v for k, v in dataclasses.asdict(params).items()})
        for key, value in self.values.items():
            full.setdefault(key, value)  # data paths and the teacher path
        prov = {k: self.provenance.get(k, "default") for k in full}
        return ResolvedConfig(full, prov)

    def echo(self) -> dict:
        """Nested view of every resolved key, for the run report."""
        nested: dict = {}
        for key in sorted(self.values):
            section, name = key.split(".")
            nested.setdefault(section, {})[name] = self.values[key]
        return nested

    def provenance_echo(self) -> dict:
        return dict(sorted(self.provenance.items()))

    def to_text(self) -> str:
        """Re-loadable config file listing every resolved key."""
        lines = []
        current = None
        for key in sorted(self.values):
            section = key.split(".")[0]
            if section != current:
                if current is not None:
                    lines.append("")
                current = section
            lines.append(f"{key} = {format_value(self.values[key])}  # {self.provenance.get(key, 'default')}")
        return "\n".join(lines) + "\n"


def _build(cls, kwargs, section):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def resolve(raw: dict, overrides=(), seed: int | None = None) -> ResolvedConfig:
    """Type-check ``raw`` plus ``--set`` overrides against the schema."""
    merged = dict(raw)
    for item in overrides:
        key, value = parse_override(item)
        merged[key] = (value, "--set")
    if seed is not None:
        merged["run.seed"] = (str(seed), "--seed")
    if "run.kind" not in merged:
        raise ConfigError("missing required key 'run.kind'")
    kind = merged["run.kind"][0].strip()
    schema = schema_for(kind)
    values, prov = {}, {}
    for key, (text, origin) in merged.items():
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} ({origin}) for a {kind} config")
        values[key] = convert(key, text, schema[key][0])
        prov[key] = origin
    missing = [k for k, (_, req) in schema.items() if req and k not in values]
    if missing:
        raise ConfigError(f"missing required key {missing[0]!r}")
    return ResolvedConfig(values, prov).completed()


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return Path(str(resources.files("kdoct") / "presets" / f"{name}.cfg"))


def load_config(path, overrides=(), seed: int | None = None) -> ResolvedConfig:
    """Read ``path`` (or a shipped preset name) and apply overrides."""
    p = Path(path)
    if not p.exists() and str(path) in PRESETS:
        p = preset_path(str(path))
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return resolve(parse_lines(text, p.name), overrides, seed)
