"""Run configuration: defaults < config file < command-line overrides.

Files are TOML or JSON with one table per section::

    seed = 3

    [gp]
    sigma_n = 0.2

    [dp]
    alpha = 0.5
    restarts = 1

Scene-relative values (GP length scales, DBSCAN radius) default to ``None``
and are resolved against the dataset's bounding-box diagonal at train time.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .dpgp import DpConfig
from .gp import GpHyper, WeightParams
from .online import OnlineConfig
from .tpm import CHI2_95_2DOF, PassageParams
from .transitions import DbscanParams, TestConfig


class ConfigError(ValueError):
    pass


@dataclass
class GpSection:
    sigma_x: float = 1.0
    sigma_y: float = 1.0
    sigma_n: float = 0.2
    u_x: float | None = None
    u_y: float | None = None
    length_fraction: float = 0.1
    max_train: int = 400


@dataclass
class WeightSection:
    epsilon: float = 1.0
    beta: float = 2.0


@dataclass
class DpSection:
    alpha: float = 0.5
    init_clusters: int = 6
    sweeps: int = 5
    restarts: int = 1
    split_moves: bool = True
    assign: str = "argmax"


@dataclass
class TestSection:
    __test__ = False

    significance: float = 0.05
    min_run: int = 6
    min_support: float = 0.5
    max_gap: int = 1
    min_members: int = 3
    max_iter: int = 25


@dataclass
class DbscanSection:
    eps: float | None = None
    eps_fraction: float = 0.03
    min_pts: int = 3


@dataclass
class OnlineSection:
    window_size: int = 6
    l_thresh: float | None = None
    threshold_percentile: float = 1.0
    threshold_margin: float = 0.75
    p_min: float = 0.0


@dataclass
class ModelSection:
    min_pattern_size: int = 3
    chi2_gate: float = CHI2_95_2DOF


_SECTIONS = {
    "gp": GpSection,
    "weight": WeightSection,
    "dp": DpSection,
    "test": TestSection,
    "dbscan": DbscanSection,
    "online": OnlineSection,
    "model": ModelSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    gp: GpSection = field(default_factory=GpSection)
    weight: WeightSection = field(default_factory=WeightSection)
    dp: DpSection = field(default_factory=DpSection)
    test: TestSection = field(default_factory=TestSection)
    dbscan: DbscanSection = field(default_factory=DbscanSection)
    online: OnlineSection = field(default_factory=OnlineSection)
    model: ModelSection = field(default_factory=ModelSection)

    # -- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = cls()
        cfg.update(d)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(read_config_file(path))

    def update(self, d: dict) -> "RunConfig":
        """Merge a (possibly partial) nested dict in place."""
        for key, val in d.items():
            if key == "seed":
                self.seed = _coerce(val, int, "seed")
            elif key in _SECTIONS:
                if not isinstance(val, dict):
                    raise ConfigError(f"[{key}] must be a table")
                sec = getattr(self, key)
                names = {f.name: f for f in fields(sec)}
                for k, v in val.items():
                    if k not in names:
                        raise ConfigError(f"unknown setting {key}.{k}")
                    setattr(sec, k, _coerce_field(v, names[k], f"{key}.{k}"))
            else:
                raise ConfigError(f"unknown config section {key!r}")
        return self

    def set(self, dotted: str, value: str) -> "RunConfig":
        """Apply a ``section.key=value`` override given as text."""
        if dotted == "seed":
            return self.update({"seed": value})
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        return self.update({sec: {key: _parse_scalar(value)}})

    def to_dict(self) -> dict:
        return asdict(self)

    # -- validation and resolution ----------------------------------------

    def validate(self) -> None:
        try:
            self.dp_config(1.0)
            self.test_config()
            self.online_config()
            self.dbscan_params(1.0)
            PassageParams(self.model.chi2_gate)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 <= self.online.threshold_percentile <= 100.0:
            raise ConfigError("online.threshold_percentile must be in [0, 100]")
        if self.online.threshold_margin < 0:
            raise ConfigError("online.threshold_margin must be >= 0")
        if self.model.min_pattern_size < 1:
            raise ConfigError("model.min_pattern_size must be >= 1")
        if self.gp.length_fraction <= 0 or self.dbscan.eps_fraction <= 0:
            raise ConfigError("scene fractions must be > 0")

    def hyper(self, diagonal: float) -> GpHyper:
        g = self.gp
        u = g.length_fraction * diagonal
        return GpHyper(g.sigma_x, g.sigma_y, g.sigma_n,
                       g.u_x if g.u_x is not None else u,
                       g.u_y if g.u_y is not None else u)

    def weight_params(self) -> WeightParams:
        return WeightParams(self.weight.epsilon, self.weight.beta)

    def dp_config(self, diagonal: float) -> DpConfig:
        d = self.dp
        return DpConfig(alpha=d.alpha, init_clusters=d.init_clusters, sweeps=d.sweeps,
                        wp=self.weight_params(), hyper=self.hyper(diagonal), seed=self.seed,
                        assign=d.assign, max_train=self.gp.max_train, restarts=d.restarts,
                        split_moves=d.split_moves)

    def test_config(self) -> TestConfig:
        return TestConfig(**asdict(self.test))

    def dbscan_params(self, diagonal: float) -> DbscanParams:
        eps = self.dbscan.eps if self.dbscan.eps is not None else self.dbscan.eps_fraction * diagonal
        return DbscanParams(eps, self.dbscan.min_pts)

    def online_config(self) -> OnlineConfig:
        o = self.online
        return OnlineConfig(o.window_size, o.l_thresh if o.l_thresh is not None else -math.inf,
                            o.p_min)

    def with_seed(self, seed: int) -> "RunConfig":
        out = RunConfig.from_dict(self.to_dict())
        out.seed = int(seed)
        return out


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix.lower() == ".toml":
            return tomllib.loads(text)
        return json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _parse_scalar(text: str) -> Any:
    low = text.strip().lower()
    if low in ("none", "null"):
        return None
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _coerce(val, typ, name):
    if val is None:
        raise ConfigError(f"{name} cannot be null")
    try:
        if typ is int and isinstance(val, float) and not val.is_integer():
            raise ValueError
        if typ is int and isinstance(val, bool):
            raise ValueError
        return typ(val)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected {typ.__name__}, got {val!r}") from None


def _coerce_field(val, f, name):
    t = str(f.type)
    optional = "None" in t
    if val is None:
        if optional:
            return None
        raise ConfigError(f"{name} cannot be null")
    if t.startswith("int"):
        return _coerce(val, int, name)
    if t.startswith("float"):
        return _coerce(val, float, name)
    if t.startswith("str"):
        return str(val)
    if t.startswith("bool"):
        if not isinstance(val, bool):
            raise ConfigError(f"{name}: expected true/false, got {val!r}")
        return val
    return val


def thread_limit() -> int | None:
    """Worker cap from ``TRAJFLOW_THREADS`` (``None`` when unset)."""
    raw = os.environ.get("TRAJFLOW_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TRAJFLOW_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("TRAJFLOW_THREADS must be >= 1")
    return n
