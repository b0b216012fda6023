"""Run configuration: one INI file with a section per component.

Example::

    [run]
    seed = 0

    [dataset]
    d_y = 1.0
    road_labels = 40
    mask_source = auto

    [model]
    n_proxy = 32

    [loss]
    delta = 5.0

    [train]
    steps = 2000
    lr = 1e-3

    [eval]
    rho = 0.2
    membership = either

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from terrex.cloud import Aabb, VoxelGeometry
from terrex.dataset import DatasetConfig
from terrex.errors import ConfigError
from terrex.model import ModelConfig
from terrex.objective import HISTOGRAM_EDGES, LossConfig


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    log_every: int = 100


@dataclass(frozen=True)
class EvalConfig:
    rho: float = 0.2
    membership: str = "either"
    edges: tuple = HISTOGRAM_EDGES


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0


def _floats(text: str, n: Optional[int] = None) -> tuple:
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_dataset(items: dict) -> DatasetConfig:
    kw, geo = {}, {}
    for key, raw in items.items():
        if key == "d_y":
            kw["d_y"] = float(raw)
        elif key == "road_labels":
            kw["road_labels"] = tuple(int(v) for v in raw.replace(",", " ").split())
        elif key == "crop":
            v = _floats(raw, 6)
            kw["crop"] = Aabb(v[:3], v[3:])
        elif key == "mask_source":
            kw["mask_source"] = raw.strip()
        elif key in ("cluster_cell", "bev_mpp"):
            kw[key] = float(raw)
        elif key == "planar_buffer":
            kw[key] = _bool(raw)
        elif key == "voxel_dims":
            geo["dims"] = tuple(int(v) for v in raw.replace(",", " ").split())
        elif key == "voxel_origin":
            geo["origin"] = _floats(raw, 3)
        elif key == "voxel_resolution":
            geo["resolution"] = float(raw)
        else:
            raise ConfigError(f"unknown key [dataset] {key}")
    if geo:
        kw["geometry"] = VoxelGeometry(**geo)
    return DatasetConfig(**kw)


def _parse_simple(cls, section: str, items: dict):
    types = {f.name: f.type for f in fields(cls)}
    kw = {}
    for key, raw in items.items():
        if key not in types:
            raise ConfigError(f"unknown key [{section}] {key}")
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            kw[key] = _floats(raw)
        elif isinstance(default, bool):
            kw[key] = _bool(raw)
        elif isinstance(default, int):
            kw[key] = int(raw)
        elif isinstance(default, float):
            kw[key] = float(raw)
        else:
            kw[key] = raw.strip()
    return cls(**kw)


SECTIONS = ("run", "dataset", "model", "loss", "train", "eval")


def parse_config(text: str, name: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                   inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=name)
    except configparser.Error as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{name}: unknown sections {sorted(unknown)}")

    def items(sec):
        return dict(cp.items(sec)) if cp.has_section(sec) else {}

    try:
        run = items("run")
        seed = int(run.pop("seed", 0))
        if run:
            raise ConfigError(f"unknown key [run] {sorted(run)[0]}")
        return RunConfig(
            dataset=_parse_dataset(items("dataset")),
            model=_parse_simple(ModelConfig, "model", items("model")),
            loss=_parse_simple(LossConfig, "loss", items("loss")),
            train=_parse_simple(TrainConfig, "train", items("train")),
            eval=_parse_simple(EvalConfig, "eval", items("eval")),
            seed=seed,
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            return parse_config(fh.read(), path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def override(cfg: RunConfig, **flags) -> RunConfig:
    """Apply ``section__key=value`` overrides; ``None`` values are ignored."""
    parts = {s: {} for s in ("dataset", "model", "loss", "train", "eval")}
    seed = cfg.seed
    for name, value in flags.items():
        if value is None:
            continue
        if name == "seed":
            seed = int(value)
            continue
        section, key = name.split("__", 1)
        parts[section][key] = value
    return RunConfig(
        dataset=replace(cfg.dataset, **parts["dataset"]),
        model=replace(cfg.model, **parts["model"]),
        loss=replace(cfg.loss, **parts["loss"]),
        train=replace(cfg.train, **parts["train"]),
        eval=replace(cfg.eval, **parts["eval"]),
        seed=seed,
    )
