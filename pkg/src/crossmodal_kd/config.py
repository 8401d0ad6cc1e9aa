"""Flat ``section.key = value`` run configuration.

Example::

    seed = 7
    data.n_train = 512
    stage.kind = ktl
    stage.teacher_checkpoint = runs/teacher/model.dikd
    loss.lambda_lg = 1e-3

Lines starting with ``#`` and blank lines are ignored.  Unknown keys are
rejected.  ``seed`` is the only required key; every other key has a default.
Per-component seeds are derived from ``seed`` with :func:`derive_seed`.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import DataConfig
from .errors import ConfigError
from .pipeline import StageConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    stage: StageConfig = field(default_factory=StageConfig)
    n_train: int = 512
    n_val: int = 128
    n_teacher: int = 2048  # RGB pretraining split, separate from the paired train split
    data_dir: str = ""
    norm: str = "inter_ocular"
    decode_mode: str = "argmax"
    # RGB teacher pretraining; same architecture as the student by default
    teacher_variant: str = "s"
    teacher_epochs: int = 20  # 0: same as stage.epochs
    teacher_base_lr: float = 1e-3
    teacher_min_lr: float = 5e-5
    window_start: int = 0
    window_len: int = 500
    values: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def digest(self) -> str:
        return config_digest(self.values)

    def stage_config(self, **overrides) -> StageConfig:
        """Stage config with resolution/k_split taken from the data section."""
        base = asdict(self.stage)
        base.update(resolution=self.data.resolution, k_split=self.data.k_split, seed=self.seed)
        base.update(overrides)
        return StageConfig(**base)


_STAGE_SECTIONS = {
    "stage": ("kind", "variant", "teacher_checkpoint", "epochs", "batch_size", "patience",
              "num_keypoints"),
    "loss": ("lambda_kp", "lambda_fm", "lambda_lg", "lambda_dikd", "lambda_ri", "lambda_fi",
             "alpha", "enable_fm", "enable_lg", "enable_fi", "enable_ri",
             "swap_injection_losses", "fm_batch_mean"),
    "optim": ("base_lr", "min_lr", "warmup_epochs", "weight_decay", "beta1", "beta2", "eps"),
}
_RUN_KEYS = {
    "data.n_train": "n_train",
    "data.n_val": "n_val",
    "data.n_teacher": "n_teacher",
    "data.dir": "data_dir",
    "eval.norm": "norm",
    "eval.decode_mode": "decode_mode",
    "ablate.teacher_variant": "teacher_variant",
    "ablate.teacher_epochs": "teacher_epochs",
    "ablate.teacher_base_lr": "teacher_base_lr",
    "ablate.teacher_min_lr": "teacher_min_lr",
    "stability.window_start": "window_start",
    "stability.window_len": "window_len",
}


def _defaults() -> dict:
    """Every accepted key with its default (``seed`` has none)."""
    out = {"seed": None}
    for f in fields(DataConfig):
        out[f"data.{f.name}"] = f.default
    stage_defaults = {f.name: f.default for f in fields(StageConfig)}
    for section, names in _STAGE_SECTIONS.items():
        for name in names:
            out[f"{section}.{name}"] = stage_defaults[name]
    run_defaults = {f.name: f.default for f in fields(RunConfig)}
    for key, attr in _RUN_KEYS.items():
        out[key] = run_defaults[attr]
    return out


KNOWN_KEYS = tuple(sorted(_defaults()))


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int) or key == "seed":
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    if default is None and raw.lower() in ("", "none"):
        return None
    return raw


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    defaults = _defaults()
    given = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in given:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        given[key] = _coerce(key, raw, defaults[key])
    for key, value in (overrides or {}).items():
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}")
        given[key] = value if not isinstance(value, str) else _coerce(key, value, defaults[key])
    if "seed" not in given:
        raise ConfigError("missing required key 'seed'")
    values = {**defaults, **given}
    return build_config(values)


def build_config(values: dict) -> RunConfig:
    data = DataConfig(**{k[5:]: v for k, v in values.items()
                         if k.startswith("data.") and k not in _RUN_KEYS})
    stage_kw = {k.split(".", 1)[1]: v for k, v in values.items()
                if k.split(".", 1)[0] in _STAGE_SECTIONS}
    stage = StageConfig(**stage_kw, seed=values["seed"],
                        resolution=data.resolution, k_split=data.k_split)
    run_kw = {attr: values[key] for key, attr in _RUN_KEYS.items()}
    cfg = RunConfig(seed=values["seed"], data=data, stage=stage, values=dict(values), **run_kw)
    if cfg.norm not in ("inter_ocular", "bbox_diag", "all"):
        raise ConfigError(f"eval.norm must be inter_ocular, bbox_diag or all, got {cfg.norm!r}")
    return cfg


def load_config(path, overrides: dict | None = None) -> RunConfig:
    return parse_config_text(Path(path).read_text(), overrides)


def config_digest(values: dict) -> str:
    """16-hex sha256 of the fully resolved key/value set."""
    canon = "\n".join(f"{k}={values[k]!r}" for k in sorted(values))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def render_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {'' if v is None else v}\n" for k, v in sorted(cfg.values.items()))
