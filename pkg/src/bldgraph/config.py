"""Pipeline configuration: one JSON document, validated with pydantic.

Every field has a default, so ``{}`` is a complete configuration. Unknown
keys are rejected. Validation errors carry dotted paths such as
``graph.split.fractions``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .graphbuild import BEIRUT_CLASS_MAP, XBD_CLASS_MAP, ChipGrid, ClassMap, EdgeWeightConfig, GraphConfig
from .neuralcore import ModelConfig
from .synth import CityConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SynthSection(_Section):
    n_buildings: int = Field(300, ge=0)
    extent: float = Field(600.0, gt=0)
    origin: tuple[float, float] = (0.0, 0.0)
    footprint_range: tuple[float, float] = (8.0, 20.0)
    max_rotation_deg: float = 30.0
    epicenter: Optional[tuple[float, float]] = None
    radius: float = Field(150.0, gt=0)
    thresholds: tuple[float, ...] = (0.3, 0.7)
    noise_sd: float = Field(0.05, ge=0)
    meta_correlation: float = Field(0.0, ge=-1, le=1)
    meta_missing: float = Field(0.2, ge=0, lt=1)
    appearance_sd: float = Field(0.0, ge=0)
    resolution: float = Field(1.0, gt=0)
    seed: Optional[int] = None  # None: use the top-level seed

    @field_validator("thresholds")
    @classmethod
    def _ascending(cls, v):
        if not v or any(b <= a for a, b in zip(v, v[1:])) or any(not 0 < t < 1 for t in v):
            raise ValueError("thresholds must be ascending values in (0, 1)")
        return v

    def city(self, seed: int) -> CityConfig:
        d = self.model_dump()
        d["seed"] = seed if self.seed is None else self.seed
        return CityConfig(**d)


class DataSection(_Section):
    synth: SynthSection = SynthSection()
    footprints: Optional[str] = None  # GeoJSON; when unset the synthetic city is generated in memory
    pre: Optional[str] = None
    post: Optional[str] = None
    label_key: str = "label"
    meta_key: str = "meta"
    chip_key: Optional[str] = None
    id_key: str = "id"

    @model_validator(mode="after")
    def _files_together(self):
        given = [p is not None for p in (self.footprints, self.pre, self.post)]
        if any(given) and not all(given):
            raise ValueError("footprints, pre and post must be given together")
        return self


class ChipGridSection(_Section):
    origin: tuple[float, float] = (0.0, 0.0)
    tile: float = Field(512.0, gt=0)


class EdgeWeightSection(_Section):
    sigma: Optional[float] = Field(None, gt=0)  # None: mean descriptor distance over the edges
    descriptor_dims: Literal[12] = 12


class SplitSection(_Section):
    fractions: tuple[float, float, float] = (0.2, 0.1, 0.7)

    @field_validator("fractions")
    @classmethod
    def _simplex(cls, v):
        if any(not f > 0 for f in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"train/test/hold fractions must be positive and sum to 1, got {list(v)}")
        return v


class GraphSection(_Section):
    buffer: float = Field(5.0, ge=0)
    crop_size: int = Field(128, ge=8)
    chip_grid: ChipGridSection = ChipGridSection()
    prune: bool = False  # drop chips without any damaged building
    damaged_classes: Optional[tuple[int, ...]] = None  # default: every class above 0
    edge_weight: EdgeWeightSection = EdgeWeightSection()
    class_map: Union[Literal["xbd", "beirut"], tuple[int, ...], None] = None
    split: SplitSection = SplitSection()
    subsample_cap: Optional[int] = Field(None, ge=1)
    meta: bool = False  # append the 20 encoded meta features to every node
    seed: Optional[int] = None

    def class_map_obj(self) -> Optional[ClassMap]:
        if self.class_map is None:
            return None
        if self.class_map == "xbd":
            return XBD_CLASS_MAP
        if self.class_map == "beirut":
            return BEIRUT_CLASS_MAP
        return ClassMap(tuple(self.class_map))

    def grid(self) -> ChipGrid:
        return ChipGrid(tuple(self.chip_grid.origin), self.chip_grid.tile)

    def build_config(self, seed: int, num_classes: Optional[int] = None) -> GraphConfig:
        return GraphConfig(buffer=self.buffer, crop_size=self.crop_size,
                           edge_weight=EdgeWeightConfig(self.edge_weight.sigma, self.edge_weight.descriptor_dims),
                           fractions=self.split.fractions, num_classes=num_classes,
                           seed=seed if self.seed is None else self.seed)


class ModelSection(_Section):
    channels: tuple[int, ...] = (16, 32, 64, 128)
    hidden: int = Field(32, ge=1)
    dropout: float = Field(0.5, ge=0, lt=1)
    use_meta: bool = False
    adjacency: Literal["graph", "identity"] = "graph"

    @field_validator("channels")
    @classmethod
    def _positive(cls, v):
        if not v or any(c < 1 for c in v):
            raise ValueError("channel plan must be a non-empty list of positive integers")
        return v

    def build(self, num_classes: int, crop_size: int) -> ModelConfig:
        return ModelConfig(channels=self.channels, meta_dim=20 if self.use_meta else 0, hidden=self.hidden,
                           num_classes=num_classes, dropout=self.dropout, crop_size=crop_size,
                           adjacency=self.adjacency)


class TrainSection(_Section):
    epochs: int = Field(300, ge=1)
    class_weights: Literal["inverse-frequency", "none"] = "inverse-frequency"
    selection: Literal["accuracy", "precision", "recall", "specificity", "f1"] = "f1"
    chunk: int = Field(16, ge=1)
    patch_cache_mb: float = Field(1536.0, ge=0)
    calibrate: bool = True  # rescale the encoder so epoch-0 differences have unit RMS
    center: bool = True  # subtract the epoch-0 node mean from the GCN input
    scale_meta: bool = False  # divide each meta column by its epoch-0 node standard deviation
    seed: Optional[int] = None


class CompareSection(_Section):
    runs: int = Field(30, ge=2)
    baseline: dict[str, Any] = Field(default_factory=lambda: {"adjacency": "identity"})

    @field_validator("baseline")
    @classmethod
    def _known_model_keys(cls, v):
        ModelSection(**v)  # raises on unknown keys or bad values
        return v


class PipelineConfig(_Section):
    seed: int = 0
    data: DataSection = DataSection()
    graph: GraphSection = GraphSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    compare: CompareSection = CompareSection()

    def train_config(self, num_classes: int, model: Optional[ModelSection] = None,
                     seed: Optional[int] = None) -> TrainConfig:
        m = (model or self.model).build(num_classes, self.graph.crop_size)
        t = self.train
        if seed is None:
            seed = self.seed if t.seed is None else t.seed
        return TrainConfig(epochs=t.epochs, seed=seed, model=m, fractions=self.graph.split.fractions,
                           class_weights=t.class_weights, selection=t.selection, chunk=t.chunk,
                           patch_cache_mb=t.patch_cache_mb, calibrate=t.calibrate, center=t.center,
                           scale_meta=t.scale_meta)

    def baseline_model(self) -> ModelSection:
        return self.model.model_copy(update=self.compare.baseline)

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def _error_path(err: ValidationError) -> tuple[str, str]:
    e = err.errors()[0]
    loc = ".".join(str(p) for p in e["loc"] if not isinstance(p, int))
    return loc, e["msg"]


def config_from_dict(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("", "configuration must be a JSON object")
    try:
        return PipelineConfig.model_validate(doc)
    except ValidationError as err:
        raise ConfigError(*_error_path(err)) from None


def parse_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as err:
        raise ConfigError("", f"cannot read config {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError("", f"{path} is not valid JSON: {err}") from None
    return config_from_dict(doc)


def serialize(cfg: PipelineConfig) -> str:
    return cfg.dumps()


def apply_overrides(cfg: PipelineConfig, assignments: list[str]) -> PipelineConfig:
    """Apply ``key.path=value`` overrides; values are parsed as JSON, falling back to strings."""
    doc = cfg.model_dump(mode="json")
    for a in assignments:
        key, sep, raw = a.partition("=")
        if not sep or not key:
            raise ConfigError(key, f"override {a!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(key, "unknown configuration section")
            node = node[p]
        node[parts[-1]] = value
    return config_from_dict(doc)
