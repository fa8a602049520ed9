"""Run configuration: defaults, YAML file, environment and flag overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .design import DesignConfig
from .evaluate import DRAW_MODES, PipelineConfig
from .reconcile import METHODS

OUTPUT_ENV = "OLSRECON_OUTPUT_DIR"
MIN_K = 100


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    structure: str | None = None
    calendar: str | None = None
    output: str = "out"
    fourier_daily: int = 3
    fourier_weekly: int = 2
    lags: tuple[int, ...] = (1, 24)
    trend: bool = True
    T_train: int = 336
    T_test: int = 24
    K: int = 2000
    levels: tuple[float, ...] = (0.10, 0.05)
    seed: int = 0
    clamp: bool = False
    method: str = "mint-shrink"
    shrinkage: float | None = None
    draws: str = "joint"
    error_pool: int = 0
    detect_level: float = 0.05
    detect_K: int = 5000
    symmetric: bool = False
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)

    def validate(self, need: tuple[str, ...] = ()) -> "RunConfig":
        for name in need:
            if getattr(self, name) is None:
                raise ConfigError(f"missing required setting {name!r}")
        for name in ("data", "structure", "calendar"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")
        if min(self.K, self.detect_K) < MIN_K:
            raise ConfigError(f"K and detect_K must be at least {MIN_K}, got {self.K} and {self.detect_K}")
        if not self.levels or any(not 0.0 < a < 1.0 for a in self.levels):
            raise ConfigError(f"levels must lie in (0, 1), got {self.levels}")
        if self.detect_level not in self.levels:
            raise ConfigError(f"detect_level {self.detect_level} is not among levels {self.levels}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.draws not in DRAW_MODES:
            raise ConfigError(f"draws must be one of {DRAW_MODES}")
        if self.T_train < 1 or self.T_test < 1:
            raise ConfigError("T_train and T_test must be positive")
        if self.fourier_daily < 0 or self.fourier_weekly < 0 or any(l < 1 for l in self.lags):
            raise ConfigError("Fourier orders must be >= 0 and lags >= 1")
        if self.shrinkage is not None and not 0.0 <= self.shrinkage <= 1.0:
            raise ConfigError("shrinkage must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        return self

    @property
    def design(self) -> DesignConfig:
        return DesignConfig(
            fourier_orders=(self.fourier_daily, self.fourier_weekly), lags=tuple(self.lags), include_trend=self.trend
        )

    def pipeline(self, K: int | None = None) -> PipelineConfig:
        return PipelineConfig(
            design=self.design,
            method=self.method,
            K=self.K if K is None else K,
            levels=tuple(self.levels),
            seed=self.seed,
            clamp=self.clamp,
            shrinkage=self.shrinkage,
            error_pool=self.error_pool,
            draws=self.draws,
        )

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["lags"] = list(self.lags)
        d["levels"] = list(self.levels)
        return d

    def digest(self) -> str:
        """Short hash of every setting that affects results (paths and workers excluded)."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("output", "workers")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    if name in ("lags", "levels"):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        cast = int if name == "lags" else float
        return tuple(cast(v) for v in value)
    default = _FIELDS[name].default
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if name in ("K", "detect_K", "seed", "T_train", "T_test", "fourier_daily", "fourier_weekly", "error_pool", "workers"):
        return int(value)
    if name in ("detect_level",):
        return float(value)
    if name == "shrinkage":
        return None if value is None else float(value)
    return value if value is None else str(value)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None, env: Mapping[str, str] | None = None) -> RunConfig:
    """Defaults, then the YAML file, then the output-dir env var, then flags.

    ``overrides`` entries equal to None are ignored so unset flags do not
    clobber file values. Relative paths in the file are resolved against the
    file's directory.
    """
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file does not exist: {p}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        unknown = set(raw) - set(_FIELDS)
        if unknown:
            raise ConfigError(f"{p}: unknown setting(s) {sorted(unknown)}")
        for k, v in raw.items():
            if k in ("data", "structure", "calendar", "output") and v is not None and not Path(v).is_absolute():
                v = str(p.parent / v)
            values[k] = v
    env = os.environ if env is None else env
    if env.get(OUTPUT_ENV):
        values["output"] = env[OUTPUT_ENV]
    for k, v in (overrides or {}).items():
        if v is not None:
            if k not in _FIELDS:
                raise ConfigError(f"unknown setting {k!r}")
            values[k] = v
    try:
        return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
