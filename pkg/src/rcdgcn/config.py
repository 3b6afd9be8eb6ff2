"""Run configuration: flat ``section.key = value`` files parsed as TOML.

Sections are ``run``, ``scenario``, ``data``, ``model``, ``train`` and
``analysis``. Unknown sections or keys are rejected; relative paths are
resolved against the directory holding the config file.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .model import VARIANTS, ConfigError, Hyper
from .synth import FEATURE_SCHEMAS
from .train import TrainConfig


@dataclass
class RunSection:
    out_dir: Path = Path("out")
    seed: int = 0


@dataclass
class ScenarioSection:
    nodes: int = 40
    days: int = 60
    incidents: int = 120
    noise_sigma: float = 1.0
    feature_schema: str = "icm495"
    corridor_len: int = 10
    link_spacing: int = 3
    seed: int | None = None  # defaults to run.seed


@dataclass
class DataSection:
    dir: Path = Path("data")
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    history: int = 12
    horizon: int = 3
    train_stride: int = 1


@dataclass
class ModelSection:
    variant: str = "rcdgcn"
    channels: int = 32
    embed_dim: int = 8
    max_hops: int = 3
    taps: int = 2
    dilations: str = "1,2;1,2"
    fcn_hidden: int = 256
    attention_mode: str = "ring"
    attention_step: str = "last"


@dataclass
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 40
    epochs: int = 200
    early_stop_patience: int = 20
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    lr_schedule: str = "constant"
    lr_final_fraction: float = 0.01


@dataclass
class AnalysisSection:
    percentile: float = 95.0
    case_margin: int = 12
    case_horizon: int = 1  # which forecast step feeds the case series


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    source: Path | None = None

    @property
    def scenario_seed(self) -> int:
        return self.run.seed if self.scenario.seed is None else self.scenario.seed

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.data.train_ratio, self.data.val_ratio, self.data.test_ratio)

    def dilations(self) -> tuple[tuple[int, ...], ...]:
        try:
            return tuple(tuple(int(d) for d in block.split(",")) for block in self.model.dilations.split(";"))
        except ValueError as exc:
            raise ConfigError(f"model.dilations: cannot parse {self.model.dilations!r}") from exc

    def hyper(self, n_nodes: int, n_states: int, n_features: int, feature_layout: str) -> Hyper:
        m = self.model
        h = Hyper(n_nodes=n_nodes, history=self.data.history, horizon=self.data.horizon, n_states=n_states,
                  n_features=n_features, max_hops=m.max_hops, embed_dim=m.embed_dim, channels=m.channels,
                  dilations=self.dilations(), taps=m.taps, fcn_hidden=m.fcn_hidden,
                  attention_mode=m.attention_mode, attention_step=m.attention_step,
                  feature_layout=feature_layout, seed=self.run.seed)
        h.validate()
        return h

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(lr=t.lr, batch_size=t.batch_size, epochs=t.epochs, rmsprop_alpha=t.rmsprop_alpha,
                               rmsprop_eps=t.rmsprop_eps, early_stop_patience=t.early_stop_patience,
                               seed=self.run.seed, lr_schedule=t.lr_schedule,
                               lr_final_fraction=t.lr_final_fraction)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def validate(self) -> None:
        s, d, m = self.scenario, self.data, self.model
        if s.nodes < 2 or s.days < 1 or s.incidents < 0 or s.noise_sigma < 0 or s.corridor_len < 2 \
                or s.link_spacing < 1:
            raise ConfigError("scenario: need nodes >= 2, days >= 1, incidents >= 0, noise_sigma >= 0, "
                              "corridor_len >= 2, link_spacing >= 1")
        if s.feature_schema not in FEATURE_SCHEMAS:
            raise ConfigError(f"scenario.feature_schema must be one of {sorted(FEATURE_SCHEMAS)}")
        if abs(sum(self.ratios) - 1.0) > 1e-9 or min(self.ratios) <= 0:
            raise ConfigError("data ratios must be positive and sum to 1")
        if d.history < 1 or d.horizon < 1 or d.train_stride < 1:
            raise ConfigError("data.history, data.horizon and data.train_stride must be >= 1")
        if m.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}")
        if not 0 < self.analysis.percentile < 100:
            raise ConfigError("analysis.percentile must lie in (0, 100)")
        if self.analysis.case_margin < 0:
            raise ConfigError("analysis.case_margin must be >= 0")
        if not 1 <= self.analysis.case_horizon <= d.horizon:
            raise ConfigError("analysis.case_horizon must lie in 1..data.horizon")
        self.dilations()
        self.train_config()


_SECTIONS = {f.name: f for f in fields(RunConfig) if f.name != "source"}


def _coerce(section: str, key: str, ftype, value):
    where = f"{section}.{key}"
    if isinstance(value, dict):
        raise ConfigError(f"{where}: nested tables are not allowed")
    if ftype in ("Path", Path):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a path string")
        return Path(value)
    if ftype in ("int", "int | None"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if ftype == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {ftype}")


def from_mapping(doc: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a config from a parsed TOML document (``{section: {key: value}}``)."""
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    cfg = RunConfig()
    for section, table in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(table, dict):
            raise ConfigError(f"{section}: expected section.key entries")
        current = getattr(cfg, section)
        known = {f.name: f for f in fields(current)}
        updates = {}
        for key, value in table.items():
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
            v = _coerce(section, key, known[key].type, value)
            if isinstance(v, Path) and not v.is_absolute():
                v = base_dir / v
            updates[key] = v
        setattr(cfg, section, replace(current, **updates))
    for section in ("run", "data"):
        sec = getattr(cfg, section)
        for f in fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, Path) and not v.is_absolute():
                setattr(sec, f.name, base_dir / v)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = from_mapping(doc, path.resolve().parent)
    cfg.source = path.resolve()
    return cfg
