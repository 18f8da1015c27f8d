"""Experiment configuration: YAML file <-> validated dataclasses.

Schema (every section optional, defaults shown in the dataclasses below)::

    name: str
    model:     {hidden: [int], cut: int, head: softmax-xent-head|mse-head}
    dataset:   {kind: blobs, classes, dims, per_class, test_per_class, spread, scale}
               or {kind: csv, train: path, test: path, classes: int}
    partition: {clients: int, gamma: float}
    rounds:    RoundConfig fields (N, E, B, selection_rate, selection_mode,
               alpha, beta_g, method, sflv1_period, fedprox_mu,
               persist_client_momentum)
    optim:     OptimConfig fields (eta, beta, weight_decay,
               lr_decay_per_round, variant, lr_schedule, lr_offset)
    latency:   {p_d_range: [lo, hi], b_range: [lo, hi], kappa, profiles_csv}
    seeds:     {data, init, selection, batching, profiles}
    target:    {mode: absolute, value} or
               {mode: relative, fraction: 0.9, baseline_method: fedavg, baseline_beta_g: 0.0}
    workers:   int

Relative paths inside the file are resolved against the file's directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .optim import OptimConfig
from .protocols import RoundConfig


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32, 32)
    cut: int = 1
    head: str = "softmax-xent-head"


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "blobs"
    classes: int = 10
    dims: int = 16
    per_class: int = 200
    test_per_class: int = 100
    spread: float = 1.0
    scale: float = 1.0
    train: str | None = None
    test: str | None = None


@dataclass(frozen=True)
class PartitionConfig:
    clients: int = 20
    gamma: float = 0.2


@dataclass(frozen=True)
class LatencyConfig:
    p_d_range: tuple[float, float] = (0.001, 0.1)
    b_range: tuple[float, float] = (1000.0, 20000.0)
    kappa: float = 100.0
    profiles_csv: str | None = None


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    selection: int = 0
    batching: int = 0
    profiles: int = 0


@dataclass(frozen=True)
class TargetConfig:
    mode: str = "relative"
    value: float | None = None
    fraction: float = 0.9
    baseline_method: str = "fedavg"
    baseline_beta_g: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    seeds: Seeds = field(default_factory=Seeds)
    target: TargetConfig = field(default_factory=TargetConfig)
    workers: int = 1

    def __post_init__(self):
        _validate(self)

    def replace(self, **sections) -> ExperimentConfig:
        return dataclasses.replace(self, **sections)

    def with_rounds(self, **kw) -> ExperimentConfig:
        return dataclasses.replace(self, rounds=dataclasses.replace(self.rounds, **kw))

    def with_seeds(self, **kw) -> ExperimentConfig:
        return dataclasses.replace(self, seeds=dataclasses.replace(self.seeds, **kw))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything runs must share to be comparable.

        Method-specific knobs (method, alpha, beta_g, sflv1 period, prox,
        optimizer variant) and the target rule are left out.
        """
        d = self.to_dict()
        d.pop("name")
        d.pop("target")
        d.pop("workers")
        for k in ("method", "alpha", "beta_g", "sflv1_period", "fedprox_mu", "persist_client_momentum"):
            d["rounds"].pop(k)
        d["optim"].pop("variant")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _validate(cfg: ExperimentConfig) -> None:
    m, ds, p, lat, t = cfg.model, cfg.dataset, cfg.partition, cfg.latency, cfg.target
    if any(h < 1 for h in m.hidden):
        raise ConfigurationError("hidden widths must be >= 1", "model.hidden")
    if m.cut < 0:
        raise ConfigurationError("must be >= 0", "model.cut")
    if ds.kind not in ("blobs", "csv"):
        raise ConfigurationError("must be blobs or csv", "dataset.kind")
    if ds.kind == "csv" and not (ds.train and ds.test):
        raise ConfigurationError("csv datasets need train and test paths", "dataset.train")
    if ds.kind == "blobs":
        for name in ("classes", "dims", "per_class", "test_per_class"):
            if getattr(ds, name) < 1:
                raise ConfigurationError("must be >= 1", f"dataset.{name}")
    if p.clients < 1:
        raise ConfigurationError("must be >= 1", "partition.clients")
    if not p.gamma > 0:
        raise ConfigurationError("must be > 0", "partition.gamma")
    for name in ("p_d_range", "b_range"):
        lo, hi = getattr(lat, name)
        if not 0 < lo <= hi:
            raise ConfigurationError("need 0 < lo <= hi", f"latency.{name}")
    if not lat.kappa > 0:
        raise ConfigurationError("must be > 0", "latency.kappa")
    if t.mode not in ("absolute", "relative"):
        raise ConfigurationError("must be absolute or relative", "target.mode")
    if t.mode == "absolute" and (t.value is None or not 0 <= t.value <= 1):
        raise ConfigurationError("absolute target needs a value in [0, 1]", "target.value")
    if t.mode == "relative" and not 0 < t.fraction <= 1:
        raise ConfigurationError("must be in (0, 1]", "target.fraction")
    if cfg.workers < 1:
        raise ConfigurationError("must be >= 1", "workers")


_SECTIONS = {
    "model": ModelConfig,
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "rounds": RoundConfig,
    "optim": OptimConfig,
    "latency": LatencyConfig,
    "seeds": Seeds,
    "target": TargetConfig,
}
_TUPLE_FIELDS = {("model", "hidden"), ("latency", "p_d_range"), ("latency", "b_range")}


def _build_section(name, cls, raw):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError("must be a mapping", name)
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigurationError("unknown field", f"{name}.{key}")
        if (name, key) in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigurationError("must be a list", f"{name}.{key}")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        if exc.path is None:
            raise ConfigurationError(str(exc), name) from exc
        raise
    except TypeError as exc:
        raise ConfigurationError(str(exc), name) from exc


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a mapping")
    unknown = set(raw) - set(_SECTIONS) - {"name", "workers"}
    if unknown:
        raise ConfigurationError("unknown section", sorted(unknown)[0])
    sections = {k: _build_section(k, cls, raw.get(k)) for k, cls in _SECTIONS.items()}
    ds = sections["dataset"]
    lat = sections["latency"]
    if base_dir is not None:
        def resolve(p):
            return str((base_dir / p).resolve()) if p and not Path(p).is_absolute() else p
        sections["dataset"] = dataclasses.replace(ds, train=resolve(ds.train), test=resolve(ds.test))
        sections["latency"] = dataclasses.replace(lat, profiles_csv=resolve(lat.profiles_csv))
    try:
        return ExperimentConfig(name=str(raw.get("name", "experiment")), workers=int(raw.get("workers", 1)), **sections)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(str(exc)) from exc


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc.strerror}", "config") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path} is not valid YAML: {exc}", "config") from exc
    return from_dict(raw or {}, path.parent)


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("smofisim.presets").iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    res = resources.files("smofisim.presets") / f"{name}.yaml"
    if not res.is_file():
        raise ConfigurationError(f"unknown preset {name!r}; have {preset_names()}", "config")
    return from_dict(yaml.safe_load(res.read_text()))


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=False)
