"""Run configuration: flat ``key = value`` files with command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .synthdata import SOURCE_STYLE, DatasetConfig, DomainStyle

MODES = ("framework", "vanilla_st", "teachers_only", "distill_only")
STUDENT_INITS = ("random", "teacher_SL", "teacher_RL")
CE_DATA = ("augmented", "genuine")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    seed: int = 0
    data_seed: int | None = None
    data_dir: str | None = None
    n_source: int = 2000
    n_target: int = 20
    n_unlabeled: int = 500
    n_val: int = 200
    target_gain: tuple[float, float, float] = (0.75, 0.9, 1.15)
    target_offset: tuple[float, float, float] = (0.05, 0.0, -0.05)
    target_blur: bool = True
    target_noise_sigma: float = 0.03
    target_saturation: float = 0.8
    iters: int = 8000
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    eval_every: int = 0
    batch_size: int = 1
    lambda_kl: float = 0.5
    lambda_ce: float = 1.0
    rounds: int = 3
    pseudo_portion: float = 0.5
    pseudo_threshold: float = 0.9
    style_transfer: bool = True
    student_init: str = "teacher_SL"
    reinit_teachers: bool = True
    student_ce_data: str = "augmented"
    baseline: bool = False
    mode: str = "framework"
    out_dir: str = "runs/default"

    def __post_init__(self):
        validate(self)

    def dataset_config(self) -> DatasetConfig:
        target = DomainStyle(gain=tuple(self.target_gain), offset=tuple(self.target_offset),
                             blur_enabled=self.target_blur, noise_sigma=self.target_noise_sigma,
                             saturation_scale=self.target_saturation)
        return DatasetConfig(n_source=self.n_source, n_target=self.n_target, n_unlabeled=self.n_unlabeled,
                             n_val=self.n_val, seed=self.seed if self.data_seed is None else self.data_seed,
                             source_style=SOURCE_STYLE, target_style=target)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["target_gain"] = list(self.target_gain)
        d["target_offset"] = list(self.target_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        d = dict(d)
        for key in ("target_gain", "target_offset"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


_CHECKS = {
    "n_source": (lambda v: v > 0, "must be positive"),
    "n_target": (lambda v: v > 0, "must be positive"),
    "n_unlabeled": (lambda v: v > 0, "must be positive"),
    "n_val": (lambda v: v > 0, "must be positive"),
    "iters": (lambda v: v > 0, "must be positive"),
    "base_lr": (lambda v: v > 0, "must be positive"),
    "momentum": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "weight_decay": (lambda v: v >= 0, "must be >= 0"),
    "poly_power": (lambda v: v > 0, "must be positive"),
    "eval_every": (lambda v: v >= 0, "must be >= 0"),
    "batch_size": (lambda v: v >= 1, "must be >= 1"),
    "lambda_kl": (lambda v: v >= 0, "must be >= 0"),
    "lambda_ce": (lambda v: v >= 0, "must be >= 0"),
    "rounds": (lambda v: v >= 1, "must be >= 1"),
    "pseudo_portion": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "pseudo_threshold": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "target_noise_sigma": (lambda v: v >= 0, "must be >= 0"),
    "target_saturation": (lambda v: v >= 0, "must be >= 0"),
    "target_gain": (lambda v: len(v) == 3 and all(g > 0 for g in v), "needs three positive values"),
    "target_offset": (lambda v: len(v) == 3, "needs three values"),
    "mode": (lambda v: v in MODES, f"must be one of {MODES}"),
    "student_init": (lambda v: v in STUDENT_INITS, f"must be one of {STUDENT_INITS}"),
    "student_ce_data": (lambda v: v in CE_DATA, f"must be one of {CE_DATA}"),
}


def validate(cfg: RunConfig) -> None:
    for key, (ok, msg) in _CHECKS.items():
        if not ok(getattr(cfg, key)):
            raise ConfigError(key, f"{getattr(cfg, key)!r} {msg}")
    if cfg.data_dir is not None and not Path(cfg.data_dir).is_dir():
        raise ConfigError("data_dir", f"{cfg.data_dir!r} is not a directory")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str):
    field_types = {f.name: f.type for f in fields(RunConfig)}
    if key not in field_types:
        raise ConfigError(key, "unknown key")
    kind = field_types[key]
    try:
        if key in ("target_gain", "target_offset"):
            return tuple(float(v) for v in text.split(","))
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("int |"):
            return None if text.strip().lower() in ("", "none") else int(text)
        if kind.startswith("str |"):
            return None if text.strip().lower() in ("", "none") else text
        return text
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {text!r}: {exc}") from None


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _parse_value(key, value)
    return values


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides`` (already typed or strings)."""
    values = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = _parse_value(key, value) if isinstance(value, str) else value
    known = {f.name for f in fields(RunConfig)}
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown key")
    return RunConfig(**values)
