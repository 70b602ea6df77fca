"""Run configuration: one YAML file with a section per subsystem.

Every value is validated before anything runs. Errors carry the line of the
offending key so a typo points straight at the file position.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .compression import CompressionSpec
from .errors import ConfigError
from .records import PROTOCOLS, ProtocolConfig

MODEL_PRESETS = ("mlp", "cnn", "shrinking", "explicit")
DATASETS = ("blobs", "moons")
TOPOLOGY_PRESETS = ("star", "chain3", "explicit")
ALLOCATION_MODES = ("static-equal", "minmax", "explicit")
PLANNERS = ("split", "hierarchical", "multihop")


@dataclass
class ModelSection:
    preset: str = "mlp"
    hidden: int = 16
    side: int = 6          # cnn only; dataset.dim must equal side * side
    channels: int = 4
    input_shape: list | None = None
    layers: list | None = None


@dataclass
class DatasetSection:
    kind: str = "blobs"
    n: int = 2000
    classes: int = 3
    dim: int = 8
    noise: float = 1.0
    separation: float = 3.0
    clients: int = 3
    beta: float | None = None          # None: IID equal shards
    test_fraction: float = 0.2
    min_size: int | None = None        # default: one batch per client


@dataclass
class TopologySection:
    preset: str = "star"
    total_hz: float = 70e6
    server_rate: float = 7e9
    cloud_rate: float = 20e9
    edge_cloud_ratio: float = 1 / 20
    spectral_efficiency: float = 1.0
    client_rates: list | None = None
    nodes: list | None = None
    links: list | None = None


@dataclass
class AllocationSection:
    mode: str = "static-equal"
    uplink_hz: dict | None = None
    downlink_hz: dict | None = None
    server_share: dict | None = None


@dataclass
class PlanSection:
    planner: str = "split"
    source: str = "client0"
    destinations: list = field(default_factory=lambda: ["server"])
    file: str | None = None            # plan JSON to train with


@dataclass
class LatencySection:
    dataset_sizes: list = field(default_factory=lambda: [10000, 20000, 40000, 80000])
    rounds_to_target: int | None = 50
    trace: str | None = None           # trace.csv from a train run
    accuracy_target: float | None = None


@dataclass
class SweepSection:
    protocols: list | None = None
    seeds: list | None = None
    clients: list | None = None
    epsl_phi: list | None = None


@dataclass
class OutputSection:
    dir: str = "runs/default"
    label: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: ModelSection = field(default_factory=ModelSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    topology: TopologySection = field(default_factory=TopologySection)
    allocation: AllocationSection = field(default_factory=AllocationSection)
    compression: CompressionSpec = field(default_factory=CompressionSpec)
    plan: PlanSection = field(default_factory=PlanSection)
    latency: LatencySection = field(default_factory=LatencySection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)
    source: str | None = None
    lines: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def label(self) -> str:
        if self.output.label:
            return self.output.label
        p = self.protocol
        return f"epsl(phi={p.epsl_phi:g})" if p.kind == "epsl" else p.kind

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=int(seed), protocol=dataclasses.replace(self.protocol, seed=int(seed)))

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("source", "lines"):
                continue
            v = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(v) if dataclasses.is_dataclass(v) else v
        return out


SECTIONS = {
    "protocol": ProtocolConfig,
    "model": ModelSection,
    "dataset": DatasetSection,
    "topology": TopologySection,
    "allocation": AllocationSection,
    "compression": CompressionSpec,
    "plan": PlanSection,
    "latency": LatencySection,
    "sweep": SweepSection,
    "output": OutputSection,
}


# --------------------------------------------------------------------------- YAML with line numbers

def _plain(node, lines: dict, path: tuple, source=None):
    """Convert a composed YAML node to Python values, recording key lines."""
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = k.value
            if key in out:
                raise ConfigError(f"duplicate key {key!r}", k.start_mark.line + 1, source)
            lines[path + (key,)] = k.start_mark.line + 1
            out[key] = _plain(v, lines, path + (key,), source)
            lines[path + (key,)] = k.start_mark.line + 1
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_plain(v, lines, path + (i,), source) for i, v in enumerate(node.value)]
    return yaml.safe_load(yaml.serialize(node))


def parse_yaml(text: str, source: str | None = None) -> tuple[dict, dict]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if node is None:
        return {}, {}
    lines: dict = {}
    data = _plain(node, lines, (), source)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, source)
    return data, lines


# --------------------------------------------------------------------------- validation

def _coerce(value, ftype: str, where: str):
    """Light type coercion for the annotations used in the section dataclasses."""
    if value is None:
        if "None" in ftype:
            return None
        raise ConfigError(f"{where} must not be null")
    base = ftype.replace(" | None", "")
    if base == "int":
        if (isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value)
                or float(value) != int(value)):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return int(value)
    if base == "float":
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where} must be a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if base == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return value
    if base == "dict":
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a mapping, got {value!r}")
        return value
    return value


def _build_section(name: str, cls, data, lines: dict, source: str | None):
    line = lines.get((name,))
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping", line, source)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        kline = lines.get((name, key), line)
        if key not in fields:
            raise ConfigError(f"unknown key {name}.{key}; expected one of {sorted(fields)}", kline, source)
        try:
            kwargs[key] = _coerce(value, str(fields[key].type), f"{name}.{key}")
        except ConfigError as exc:
            raise ConfigError(str(exc), kline, source) from None
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}", line, source) from None


def load_config(text: str, source: str | None = None) -> RunConfig:
    data, lines = parse_yaml(text, source)
    allowed = set(SECTIONS) | {"seed"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown section {key!r}; expected one of {sorted(allowed)}",
                              lines.get((key,)), source)
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}", lines.get(("seed",)), source)
    sections = {name: _build_section(name, cls, data.get(name), lines, source) for name, cls in SECTIONS.items()}
    proto = sections["protocol"]
    if "seed" not in (data.get("protocol") or {}):
        proto = dataclasses.replace(proto, seed=seed)
    sections["protocol"] = proto
    cfg = RunConfig(seed=seed, source=source, lines=lines, **sections)
    validate(cfg, lines)
    return cfg


def load_config_file(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(p)) from None
    return load_config(text, str(p))


def line_of(lines: dict, key: tuple) -> int | None:
    """Line of ``key``, or of its nearest ancestor present in the file."""
    while key:
        if key in lines:
            return lines[key]
        key = key[:-1]
    return None


def _check(cond: bool, msg: str, lines: dict, key: tuple, source):
    if not cond:
        raise ConfigError(msg, line_of(lines, key), source)


def validate(cfg: RunConfig, lines: dict | None = None) -> RunConfig:
    """Cross-field checks that do not need the model to be built."""
    lines = cfg.lines if lines is None else lines
    src = cfg.source
    d, m, t = cfg.dataset, cfg.model, cfg.topology
    _check(d.kind in DATASETS, f"dataset.kind must be one of {DATASETS}", lines, ("dataset", "kind"), src)
    _check(d.n >= 2 and d.classes >= 2 and d.dim >= 1, "dataset needs n >= 2, classes >= 2, dim >= 1",
           lines, ("dataset",), src)
    _check(d.clients >= 1, "dataset.clients must be >= 1", lines, ("dataset", "clients"), src)
    _check(0.0 < d.test_fraction < 1.0, "dataset.test_fraction must lie in (0, 1)",
           lines, ("dataset", "test_fraction"), src)
    _check(d.beta is None or d.beta > 0, "dataset.beta must be > 0", lines, ("dataset", "beta"), src)
    if d.kind == "moons":
        _check(d.classes == 2 and d.dim == 2, "moons data has classes=2 and dim=2", lines, ("dataset",), src)
    _check(m.preset in MODEL_PRESETS, f"model.preset must be one of {MODEL_PRESETS}", lines, ("model", "preset"), src)
    if m.preset == "explicit":
        _check(bool(m.layers), "model.layers is required for the explicit preset", lines, ("model",), src)
        _check(all(isinstance(x, dict) and "kind" in x for x in m.layers),
               "each model.layers entry needs a kind", lines, ("model", "layers"), src)
    if m.preset == "cnn":
        _check(m.side * m.side == d.dim, f"cnn preset needs dataset.dim == side*side ({m.side * m.side})",
               lines, ("model", "side"), src)
    _check(t.preset in TOPOLOGY_PRESETS, f"topology.preset must be one of {TOPOLOGY_PRESETS}",
           lines, ("topology", "preset"), src)
    for key in ("total_hz", "server_rate", "cloud_rate", "edge_cloud_ratio", "spectral_efficiency"):
        _check(getattr(t, key) > 0, f"topology.{key} must be > 0", lines, ("topology", key), src)
    if t.client_rates is not None:
        _check(len(t.client_rates) == d.clients, "topology.client_rates needs one rate per client",
               lines, ("topology", "client_rates"), src)
    if t.preset == "explicit":
        _check(bool(t.nodes), "topology.nodes is required for the explicit preset", lines, ("topology",), src)
    a = cfg.allocation
    _check(a.mode in ALLOCATION_MODES, f"allocation.mode must be one of {ALLOCATION_MODES}",
           lines, ("allocation", "mode"), src)
    if a.mode == "explicit":
        _check(a.uplink_hz is not None and a.downlink_hz is not None and a.server_share is not None,
               "explicit allocation needs uplink_hz, downlink_hz and server_share", lines, ("allocation",), src)
    _check(cfg.plan.planner in PLANNERS, f"plan.planner must be one of {PLANNERS}", lines, ("plan", "planner"), src)
    lat = cfg.latency
    _check(all(isinstance(s, int) and s > 0 for s in lat.dataset_sizes),
           "latency.dataset_sizes must be positive integers", lines, ("latency", "dataset_sizes"), src)
    _check(lat.rounds_to_target is None or lat.rounds_to_target > 0, "latency.rounds_to_target must be > 0",
           lines, ("latency", "rounds_to_target"), src)
    p = cfg.protocol
    _check(p.kind in PROTOCOLS, f"protocol.kind must be one of {PROTOCOLS}, got {p.kind!r}",
           lines, ("protocol", "kind"), src)
    _check(p.batch_size >= 1, "protocol.batch_size must be >= 1", lines, ("protocol", "batch_size"), src)
    _check(p.rounds >= 0, "protocol.rounds must be >= 0", lines, ("protocol", "rounds"), src)
    _check(p.lr > 0, "protocol.lr must be > 0", lines, ("protocol", "lr"), src)
    _check(0.0 <= p.epsl_phi <= 1.0, "protocol.epsl_phi must lie in [0, 1]", lines, ("protocol", "epsl_phi"), src)
    _check(p.sfl_avg_period >= 1, "protocol.sfl_avg_period must be >= 1", lines, ("protocol", "sfl_avg_period"), src)
    _check(p.cut >= 0, "protocol.cut must be >= 0", lines, ("protocol", "cut"), src)
    if cfg.sweep.protocols:
        bad = [k for k in cfg.sweep.protocols if k not in PROTOCOLS]
        _check(not bad, f"sweep.protocols has unknown entries {bad}", lines, ("sweep", "protocols"), src)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


__all__ = ["RunConfig", "line_of", "load_config", "load_config_file", "parse_yaml", "validate", "dump_config",
           "ModelSection", "DatasetSection", "TopologySection", "AllocationSection", "PlanSection",
           "LatencySection", "SweepSection", "OutputSection"]
