import pytest

from kdoct.config import PRESETS, load_config, parse_lines, preset_path, resolve
from kdoct.errors import ConfigError


def test_teacher_preset_values():
    cfg = load_config("teacher")
    t = cfg.train_config()
    assert (t.head_lr, t.backbone_lr, t.weight_decay) == (1e-4, 2e-5, 0.05)
    assert (t.warmup_epochs, t.max_epochs, t.patience, t.min_lr) == (10, 150, 25, 1e-7)
    assert (t.batch_size, t.accumulation_steps) == (4, 4)
    assert (t.profile.randaugment_n, t.profile.randaugment_m, t.profile.rotation_deg) == (2, 9, 20.0)
    assert t.loss == "focal" and t.swa
    assert not any(k.startswith("distill.") for k in cfg.values)


def test_student_preset_values():
    cfg = load_config("student")
    t = cfg.train_config()
    assert t.head_lr == t.backbone_lr == 1e-3
    assert (t.weight_decay, t.warmup_epochs, t.max_epochs, t.patience, t.min_lr) == (0.01, 5, 100, 20, 1e-6)
    assert (t.batch_size, t.accumulation_steps) == (8, 2)
    assert (t.profile.randaugment_m, t.profile.rotation_deg) == (7, 15.0)
    assert t.loss == "ce" and not t.swa
    d = cfg.distill_config("teacher.kdoc").distill
    assert (d.temperature, d.alpha_soft, d.beta_hard) == (4.0, 0.7, 0.3)


@pytest.mark.parametrize("name", PRESETS)
def test_override_reflected_with_provenance(name):
    cfg = load_config(name, ["optim.base_lr=0.01"])
    assert cfg.train_config().head_lr == 0.01
    assert cfg.provenance["optim.base_lr"] == "--set"
    assert "--set" in cfg.to_text()
    assert cfg.provenance["optim.weight_decay"].startswith(preset_path(name).name)


def test_seed_flag_overrides_file():
    cfg = load_config("teacher_desk", seed=7)
    assert cfg.train_config().seed == 7
    assert cfg.provenance["run.seed"] == "--seed"


def test_echo_reproduces_config():
    cfg = load_config("student_desk", ["model.widths=8,16,24", "augment.p_erase=0.0"])
    again = resolve(parse_lines(cfg.to_text(), "echo.cfg"))
    assert again.values == cfg.values
    assert again.train_config() == cfg.train_config()
    assert again.train_config().model.widths == (8, 16, 24)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="optim.base_rate"):
        load_config("teacher", ["optim.base_rate=0.1"])
    # distillation keys do not belong in a teacher config
    with pytest.raises(ConfigError, match="distill.temperature"):
        load_config("teacher", ["distill.temperature=2"])


def test_type_error_names_key_and_type():
    with pytest.raises(ConfigError, match=r"train.batch_size: expected an integer"):
        load_config("teacher", ["train.batch_size=four"])
    with pytest.raises(ConfigError, match=r"train.swa: expected true or false"):
        load_config("teacher", ["train.swa=maybe"])
    with pytest.raises(ConfigError, match=r"model.stage_depths: expected comma-separated integers"):
        load_config("teacher", ["model.stage_depths=1,x,1,1"])


def test_missing_required_key(tmp_path):
    text = preset_path("teacher").read_text().replace("optim.min_lr = 1e-7\n", "")
    path = tmp_path / "t.cfg"
    path.write_text(text)
    with pytest.raises(ConfigError, match="missing required key 'optim.min_lr'"):
        load_config(path)
    with pytest.raises(ConfigError, match="run.kind"):
        resolve({})


def test_malformed_lines(tmp_path):
    with pytest.raises(ConfigError, match="t.cfg:2"):
        parse_lines("run.kind = teacher\nnot a pair\n", "t.cfg")
    with pytest.raises(ConfigError, match="section.key"):
        parse_lines("kind = teacher\n", "t.cfg")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_lines("run.seed = 1\nrun.seed = 2\n", "t.cfg")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.cfg")


def test_invalid_values_surface_as_config_errors():
    with pytest.raises(ConfigError):
        load_config("teacher", ["loss.kind=hinge"])
    with pytest.raises(ConfigError):
        load_config("teacher", ["schedule.warmup_epochs=200"])
    with pytest.raises(ConfigError):
        load_config("teacher", ["augment.p_hflip=1.5"])
    with pytest.raises(ConfigError):
        load_config("teacher", ["model.stage_widths=64,32,16,8"])


def test_distill_needs_teacher_path():
    with pytest.raises(ConfigError, match="teacher"):
        load_config("student").distill_config()
    with pytest.raises(ConfigError, match="run.kind = student"):
        load_config("teacher").distill_config("t.kdoc")
    assert load_config("student", ["distill.teacher=t.kdoc"]).distill_config().teacher_path == "t.kdoc"
