"""Experiment configuration: reference-scenario defaults, flat key=value files."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .popularity import RATING_TRANSFORMS, CfHyperParams
from .simcore import DEFAULT_TOTAL_BACKHAUL, DEFAULT_TOTAL_WIRELESS
from .trace import SyntheticTraceParams


class ConfigError(ValueError):
    pass


def default_storage_grid() -> tuple[float, ...]:
    return tuple(i / 20 for i in range(21))


@dataclass(frozen=True)
class ExperimentConfig:
    trace_file: Optional[str] = None
    synthetic: SyntheticTraceParams = field(default_factory=SyntheticTraceParams)
    num_cells: int = 16
    total_backhaul: float = DEFAULT_TOTAL_BACKHAUL
    total_wireless: float = DEFAULT_TOTAL_WIRELESS
    shared_backhaul: bool = False
    storage_grid: tuple = field(default_factory=default_storage_grid)
    train_fraction: float = 0.3
    cf: CfHyperParams = field(default_factory=CfHyperParams)
    normalize_ratings: bool = False
    rating_transform: str = "log1p"
    density_grid: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    backhaul_ratio_grid: tuple = (0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0)
    backhaul_storage: float = 0.4
    seed: int = 0
    repeats: int = 1
    workers: int = 1
    output_dir: str = "results"
    csv_header: bool = False

    def validate(self) -> None:
        for name in ("storage_grid", "density_grid", "backhaul_ratio_grid"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must not be empty")
        if any(not 0 <= s <= 1 for s in self.storage_grid):
            raise ConfigError("storage fractions must lie in [0, 1]")
        if any(not 0 < d <= 1 for d in self.density_grid):
            raise ConfigError("training densities must lie in (0, 1]")
        if not 0 < self.train_fraction <= 1:
            raise ConfigError("train_fraction must lie in (0, 1]")
        if not 0 <= self.backhaul_storage <= 1:
            raise ConfigError("backhaul_storage must lie in [0, 1]")
        if self.num_cells < 1 or self.repeats < 1 or self.workers < 1:
            raise ConfigError("num_cells, repeats and workers must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.rating_transform not in RATING_TRANSFORMS:
            raise ConfigError(f"rating_transform must be one of {RATING_TRANSFORMS}")
        self.synthetic.validate()
        self.cf.validate()


_UNITS = {"": 1, "B": 1, "KB": 10**3, "MB": 10**6, "GB": 10**9, "TB": 10**12}
_SIZE_RE = re.compile(r"^\s*([0-9.eE+-]+)\s*([KMGT]?B)?(?:/S)?\s*$", re.IGNORECASE)


def parse_bytes(text: str) -> float:
    """'3.8MB', '4 MB/s', '6.024GB', '512' -> bytes (decimal units)."""
    m = _SIZE_RE.match(text)
    if not m:
        raise ConfigError(f"not a byte quantity: {text!r}")
    number, unit = m.groups()
    try:
        return float(number) * _UNITS[(unit or "").upper()]
    except ValueError:
        raise ConfigError(f"not a byte quantity: {text!r}") from None


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_grid(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"not a comma-separated number list: {text!r}") from None


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        value = float(text)  # accepts 5e4
        if not value.is_integer():
            raise ValueError(f"not an integer: {text!r}") from None
        return int(value)


# key -> (section, field, parser); section None means ExperimentConfig itself
_KEYS = {
    "trace_file": (None, "trace_file", str),
    "num_cells": (None, "num_cells", _int),
    "total_backhaul": (None, "total_backhaul", parse_bytes),
    "total_wireless": (None, "total_wireless", parse_bytes),
    "shared_backhaul": (None, "shared_backhaul", _parse_bool),
    "storage_grid": (None, "storage_grid", _parse_grid),
    "train_fraction": (None, "train_fraction", float),
    "normalize_ratings": (None, "normalize_ratings", _parse_bool),
    "rating_transform": (None, "rating_transform", str),
    "density_grid": (None, "density_grid", _parse_grid),
    "backhaul_ratio_grid": (None, "backhaul_ratio_grid", _parse_grid),
    "backhaul_storage": (None, "backhaul_storage", float),
    "seed": (None, "seed", _int),
    "repeats": (None, "repeats", _int),
    "workers": (None, "workers", _int),
    "output_dir": (None, "output_dir", str),
    "csv_header": (None, "csv_header", _parse_bool),
    "num_contents": ("synthetic", "num_contents", _int),
    "num_requests": ("synthetic", "num_requests", _int),
    "duration": ("synthetic", "duration", float),
    "zipf_exponent": ("synthetic", "zipf_exponent", float),
    "size_log_mean": ("synthetic", "size_log_mean", float),
    "size_log_sigma": ("synthetic", "size_log_sigma", float),
    "min_size": ("synthetic", "min_size", lambda t: int(parse_bytes(t))),
    "max_size": ("synthetic", "max_size", lambda t: int(parse_bytes(t))),
    "bitrate": ("synthetic", "bitrate", parse_bytes),
    "rank": ("cf", "rank", _int),
    "regularization": ("cf", "regularization", float),
    "learning_rate": ("cf", "learning_rate", float),
    "epochs": ("cf", "epochs", _int),
    "init_scale": ("cf", "init_scale", float),
    "tolerance": ("cf", "tolerance", float),
    "center": ("cf", "center", _parse_bool),
}

CONFIG_KEYS = tuple(_KEYS)


def apply_overrides(config: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    top: dict = {}
    nested: dict[str, dict] = {"synthetic": {}, "cf": {}}
    for key, raw in pairs.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, parse = _KEYS[key]
        try:
            value = parse(raw.strip())
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        (nested[section] if section else top)[name] = value
    for section, values in nested.items():
        if values:
            top[section] = dataclasses.replace(getattr(config, section), **values)
    out = dataclasses.replace(config, **top)
    out.validate()
    return out


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value
    return apply_overrides(base or ExperimentConfig(), pairs)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)
