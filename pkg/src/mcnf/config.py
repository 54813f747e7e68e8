"""INI-style run configuration: one section per component, flags override."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

METHODS = ("DQR", "MCQR", "MCD", "CQR", "MCCP", "MCNF", "NF")


@dataclass(frozen=True)
class DqrSection:
    epochs: int = 100
    lr: float = 5e-4
    weight_decay: float = 1e-6
    batch_size: int = 32
    hidden_width: int = 64
    n_hidden: int = 2
    dropout: float = 0.1
    proxy_tap: int = 0  # 0 means the last hidden block


@dataclass(frozen=True)
class McdSection:
    n_samples: int = 50
    baseline_resamples: int = 1000


@dataclass(frozen=True)
class FlowSection:
    layers: int = 2
    knots: int = 16
    tail_bound: float = 5.0
    conditioner_hidden: int = 64


@dataclass(frozen=True)
class McnfSection:
    tau: float = 1e10
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 32
    n_nf: int = 500


@dataclass(frozen=True)
class ConformalSection:
    alpha: float = 0.1
    cal_fraction: float = 0.2


@dataclass(frozen=True)
class DatasetSection:
    """Either a synthetic preset (with overrides) or a CSV path plus target column."""

    name: str = "romano-mod"
    csv: str = ""
    target: str = ""
    n: int = 2500
    offset: float = 0.1
    slope_noise: float = 0.05
    slope: float | None = None
    outlier_threshold: float | None = None
    outlier_scale: float = 25.0
    x_low: float = 0.0
    x_high: float = 10.0
    sin_squared: bool = False
    split_ratio: float = 0.8


@dataclass(frozen=True)
class RunConfig:
    dqr: DqrSection = field(default_factory=DqrSection)
    mcd: McdSection = field(default_factory=McdSection)
    flow: FlowSection = field(default_factory=FlowSection)
    mcnf: McnfSection = field(default_factory=McnfSection)
    conformal: ConformalSection = field(default_factory=ConformalSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    seeds: tuple = tuple(range(20))
    methods: tuple = METHODS
    out: str = "runs"

    def with_overrides(self, **sections) -> "RunConfig":
        """``cfg.with_overrides(mcnf={"tau": 100})`` returns an updated copy."""
        updates = {}
        for name, values in sections.items():
            if name in ("seeds", "methods", "out"):
                updates[name] = values
                continue
            current = getattr(self, name)
            updates[name] = replace(current, **{k: _coerce(current, k, v) for k, v in values.items()})
        return replace(self, **updates)

    def as_dict(self) -> dict:
        return asdict(self)


_SECTIONS = ("dqr", "mcd", "flow", "mcnf", "conformal", "dataset")


def _coerce(section, key, raw):
    known = {f.name: f for f in fields(section)}
    if key not in known:
        raise ConfigError(f"unknown key {type(section).__name__}.{key}; known keys: {sorted(known)}")
    default = getattr(type(section)(), key)
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            if default is None and text.lower() in ("", "none"):
                return None
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return text


def parse_seeds(text: str) -> tuple:
    """``"0-9"``, ``"1,3,5"`` or a mix like ``"0-4,10"``."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part:
                a, b = part.split("-", 1)
                seeds.extend(range(int(a), int(b) + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse seed list {text!r}") from None
    if not seeds:
        raise ConfigError("empty seed list")
    return tuple(seeds)


def parse_methods(text) -> tuple:
    items = text.split(",") if isinstance(text, str) else list(text)
    methods = tuple(m.strip().upper() for m in items if m.strip())
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ConfigError(f"unknown method(s) {unknown}; choose from {list(METHODS)}")
    return methods


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    sections = {}
    for name in parser.sections():
        if name == "run":
            run = parser[name]
            if "seeds" in run:
                sections["seeds"] = parse_seeds(run["seeds"])
            if "methods" in run:
                sections["methods"] = parse_methods(run["methods"])
            if "out" in run:
                sections["out"] = run["out"]
            extra = set(run) - {"seeds", "methods", "out"}
            if extra:
                raise ConfigError(f"unknown key(s) in [run]: {sorted(extra)}")
            continue
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]; known sections: {list(_SECTIONS) + ['run']}")
        sections[name] = dict(parser[name])
    return cfg.with_overrides(**sections)
