"""Run configuration: one TOML file, dotted ``--set`` overrides, strict key checking."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataio import DEFAULT_COLUMNS, FOURSQUARE_TIME, MAX_LEN
from .errors import ConfigError

SYNTHETIC = ("", "tree", "loop", "switching")


@dataclass
class DataSection:
    path: str = ""
    synthetic: str = ""  # use a built-in corpus instead of manifests
    manifests: str = ""  # directory written by ``ingest``; defaults to the output directory
    delimiter: str = "\t"
    header: bool = False
    time_format: str = FOURSQUARE_TIME
    encoding: str = "latin-1"
    columns: dict = field(default_factory=lambda: dict(DEFAULT_COLUMNS))
    max_malformed_frac: float = 0.10
    min_poi_checkins: int = 5
    gap_hours: float = 24.0
    max_len: int = MAX_LEN
    regions: int = 40


@dataclass
class ModelSection:
    d: int = 64
    d_geo: int = 16
    d_time: int = 24
    heads: int = 4
    layers: int = 2
    n_anchors: int = 50
    top_k: int = 8
    c: float = 1.0
    fusion: list = field(default_factory=lambda: [0.5, 0.3, 0.1, 0.1])
    causal: bool = True
    use_local_time: bool = False


@dataclass
class PretrainSection:
    epochs: int = 50
    lr: float = 0.01
    negatives: int = 5
    batch_edges: int = 4096
    window_hours: float = 6.0
    init_std: float = 0.02
    tables: str = ""  # pretrained tables to load in ``train``; defaults to <out>/tables.npz


@dataclass
class TrainSection:
    batch_size: int = 128
    lr: float = 1e-3
    epochs: int = 50
    clip_norm: float = 5.0
    task_weights: dict = field(default_factory=dict)
    resume: str = ""


@dataclass
class EvalSection:
    checkpoint: str = ""
    split: str = "test"
    use_best: bool = True


@dataclass
class SceneSection:
    gap_hours: float = 6.0
    low: float = 0.15
    high: float = 0.4
    bins: int = 20


@dataclass
class BenchSection:
    lengths: list = field(default_factory=lambda: [256, 512, 1024, 2048])
    dims: list = field(default_factory=lambda: [16, 32, 64, 128])
    d: int = 64
    repeats: int = 5
    batch: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    ablations: list = field(default_factory=list)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    scene: SceneSection = field(default_factory=SceneSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(name: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{name}: expected a list, got {value!r}")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a table, got {value!r}")
    return value


def _build(cls, raw: dict, prefix: str = ""):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    obj = cls()
    for name, value in raw.items():
        default = getattr(obj, name)
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{name}: expected a table")
            setattr(obj, name, _build(type(default), value, f"{prefix}{name}."))
        else:
            setattr(obj, name, _coerce(prefix + name, default, value))
    return obj


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is read as a TOML literal, falling back to a bare string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path=None, overrides=(), seed: int | None = None, out: str | None = None,
                ablations=()) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        keys, value = parse_override(item)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a scalar")
        node[keys[-1]] = value
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    if ablations:
        raw["ablations"] = list(raw.get("ablations", [])) + list(ablations)
    cfg = _build(RunConfig, raw)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .model import canonical_ablation

    cfg.ablations = sorted({canonical_ablation(a) for a in cfg.ablations})
    if cfg.data.synthetic not in SYNTHETIC:
        raise ConfigError(f"data.synthetic must be one of {SYNTHETIC}")
    if not 0 <= cfg.data.max_malformed_frac <= 1:
        raise ConfigError("data.max_malformed_frac must lie in [0, 1]")
    if len(cfg.model.fusion) != 4:
        raise ConfigError("model.fusion needs four weights (user, poi, category, region)")
    positive = {
        "data.min_poi_checkins": cfg.data.min_poi_checkins, "data.gap_hours": cfg.data.gap_hours,
        "data.regions": cfg.data.regions, "pretrain.lr": cfg.pretrain.lr,
        "pretrain.negatives": cfg.pretrain.negatives, "pretrain.batch_edges": cfg.pretrain.batch_edges,
        "train.batch_size": cfg.train.batch_size, "train.lr": cfg.train.lr,
        "train.clip_norm": cfg.train.clip_norm, "model.c": cfg.model.c, "bench.repeats": cfg.bench.repeats,
        "bench.batch": cfg.bench.batch, "scene.bins": cfg.scene.bins,
    }
    for name, v in positive.items():
        if not v > 0:
            raise ConfigError(f"{name} must be positive")
    if cfg.pretrain.epochs < 0 or cfg.train.epochs < 0:
        raise ConfigError("epoch counts must be nonnegative")
    if cfg.data.max_len < 3:
        raise ConfigError("data.max_len must be at least 3")
    if not 1 <= cfg.model.top_k <= cfg.model.n_anchors:
        raise ConfigError("model.top_k must lie in [1, model.n_anchors]")
    if cfg.model.d % cfg.model.heads:
        raise ConfigError("model.heads must divide model.d")
    if cfg.eval.split not in ("train", "val", "test"):
        raise ConfigError("eval.split must be train, val or test")
    if not 0 <= cfg.scene.low <= cfg.scene.high <= 1:
        raise ConfigError("scene thresholds need 0 <= low <= high <= 1")
