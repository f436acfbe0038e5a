"""Run configuration and its TOML-compatible text form.

Top-level keys set :class:`RunConfig` fields; the ``[source]`` and
``[target]`` sections set the two :class:`DomainSpec` objects.
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .synthdata import SOURCE_SPEC, TARGET_SPEC, DomainSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_source: int = 500
    n_target: int = 500
    n_source_holdout: int = 200
    batch_size: int = 16
    lr: float = 2e-4
    lr_backbone: float = 2e-5
    # from-scratch source training needs a larger step than adaptation
    pretrain_lr: float = 5e-3
    pretrain_lr_backbone: float = 5e-4
    E_pre: int = 30
    E_teach: int = 30
    E_decay: int = 10
    E_reinit: int = 20
    # mask annealing
    mu0: float = 0.3
    mu_min: float = 0.05
    mu_max: float = 0.95
    eta_min: float = 0.05
    eta_max: float = 0.15
    T_i: int = 100
    ema_beta_lbar: float = 0.9
    fixed_mask_ratio: float = 0.3
    mask_whole_map: bool = False
    # teacher and pseudo-labels
    gamma_ema: float = 0.9996
    c_soft: float = 0.15
    c_hard: float = 0.80
    alpha_acr: float = 5.0
    e_total: int = 0  # 0: E_teach * iterations per epoch
    # objective
    lambda_unsup: float = 1.0
    lambda_mask: float = 1.0
    beta_bac: float = 0.3
    beta_enc: float = 1.0
    beta_dec: float = 1.0
    grl_lambda: float = 1.0
    strong_blur_sigma: float = 1.0
    # ablation switches
    enable_ma: bool = True
    enable_acr: bool = True
    enable_adv: bool = True
    enable_selective: bool = True
    # evaluation
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    fpi: tuple[float, ...] = (0.05, 0.1, 0.3, 0.5, 1.0, 2.0)
    froc_every: int = 1
    probe_size: int = 64
    source_spec: DomainSpec = SOURCE_SPEC
    target_spec: DomainSpec = TARGET_SPEC

    def __post_init__(self):
        def need(cond: bool, msg: str):
            if not cond:
                raise ConfigError(msg)

        for name in ("n_source", "n_target", "n_source_holdout", "E_pre", "E_teach",
                     "E_decay", "E_reinit", "e_total", "froc_every", "probe_size"):
            need(getattr(self, name) >= 0, f"{name} must be nonnegative")
        need(self.seed >= 0, "seed must be nonnegative")
        need(self.batch_size >= 2 and self.batch_size % 2 == 0,
             "batch_size must be even so source and target halves match")
        need(self.lr > 0 and self.lr_backbone >= 0 and self.pretrain_lr > 0
             and self.pretrain_lr_backbone >= 0, "learning rates must be positive")
        need(self.E_reinit <= self.E_teach, "E_reinit must not exceed E_teach")
        need(self.E_decay <= self.E_teach, "E_decay must not exceed E_teach")
        need(0.0 <= self.mu_min <= self.mu_max <= 1.0, "need 0 <= mu_min <= mu_max <= 1")
        need(self.mu_min <= self.mu0 <= self.mu_max, "mu0 must lie in [mu_min, mu_max]")
        need(0.0 <= self.fixed_mask_ratio <= 1.0, "fixed_mask_ratio must lie in [0, 1]")
        need(0.0 <= self.eta_min <= self.eta_max, "need 0 <= eta_min <= eta_max")
        need(self.T_i > 0, "T_i must be positive")
        need(0.0 <= self.ema_beta_lbar < 1.0, "ema_beta_lbar must lie in [0, 1)")
        need(0.0 < self.gamma_ema < 1.0, "gamma_ema must lie in (0, 1)")
        need(0.0 <= self.c_soft <= self.c_hard <= 1.0, "need 0 <= c_soft <= c_hard <= 1")
        need(self.alpha_acr > 0, "alpha_acr must be positive")
        for name in ("lambda_unsup", "lambda_mask", "beta_bac", "beta_enc", "beta_dec",
                     "grl_lambda", "strong_blur_sigma"):
            need(getattr(self, name) >= 0, f"{name} must be nonnegative")
        need(0.0 <= self.score_threshold <= 1.0, "score_threshold must lie in [0, 1]")
        need(0.0 < self.nms_iou <= 1.0, "nms_iou must lie in (0, 1]")
        need(len(self.fpi) > 0 and list(self.fpi) == sorted(self.fpi) and self.fpi[0] > 0,
             "fpi must be a nonempty ascending list of positive values")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name not in ("source_spec", "target_spec")}
_SPEC_FIELDS = {f.name: f for f in fields(DomainSpec)}


def _coerce(name: str, value, default):
    """Check a parsed TOML value against the type of the field default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name}: expected an array of numbers")
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string")
        return value
    raise ConfigError(f"{name}: unsupported field type")


def _spec_from(table: dict, base: DomainSpec, section: str) -> DomainSpec:
    kw = {}
    for key, value in table.items():
        if key not in _SPEC_FIELDS:
            raise ConfigError(f"unknown key [{section}].{key}")
        kw[key] = _coerce(f"{section}.{key}", value, getattr(base, key))
    try:
        return dataclasses.replace(base, **kw)
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    kw = {}
    for key, value in data.items():
        if key in ("source", "target"):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a section")
            base = SOURCE_SPEC if key == "source" else TARGET_SPEC
            kw[f"{key}_spec"] = _spec_from(value, base, key)
        elif key in _RUN_FIELDS:
            kw[key] = _coerce(key, value, _RUN_FIELDS[key].default)
        else:
            raise ConfigError(f"unknown key {key}")
    return RunConfig(**kw)


def parse_config(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None
    return config_from_dict(data)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{name} = {_fmt(getattr(cfg, name))}" for name in _RUN_FIELDS]
    for section in ("source", "target"):
        spec = getattr(cfg, f"{section}_spec")
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{name} = {_fmt(getattr(spec, name))}" for name in _SPEC_FIELDS)
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(dump_config(cfg))
    return path
