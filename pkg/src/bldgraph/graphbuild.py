"""Region graph assembly: pruning, class merging, splits, weighted Delaunay edges."""
from __future__ import annotations

import json
import math
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import geometry as geo
from .ingest import (CHANNELS, CROP_SIZE, META_DIM, BuildingRecord, MetaSchema, RasterImage,
                     encode_meta, extract_crop, feature_matrix)

SPLITS = ("train", "test", "hold")
DEFAULT_FRACTIONS = (0.2, 0.1, 0.7)
GRAPH_MAGIC = b"BLDG"
GRAPH_VERSION = 1
DUPLICATE_NUDGE = 1e-6  # metres added to x of a repeated centroid


class GraphBuildError(ValueError):
    pass


# -- chips and pruning --------------------------------------------------------

@dataclass(frozen=True)
class ChipGrid:
    origin: geo.Point = geo.Point(0.0, 0.0)
    tile: float = 512.0

    def __post_init__(self):
        if not self.tile > 0:
            raise ValueError(f"chip tile must be positive, got {self.tile}")

    def chip_of(self, p: geo.Point) -> str:
        i = math.floor((p.x - self.origin.x) / self.tile)
        j = math.floor((p.y - self.origin.y) / self.tile)
        return f"{i}_{j}"


def chip_id_of(record: BuildingRecord, grid: ChipGrid, buffer: float = 0.0) -> str:
    if record.chip_id is not None:
        return record.chip_id
    return grid.chip_of(geo.centroid(geo.buffered_envelope(record.polygon, buffer)))


def prune_chips(records: Sequence[BuildingRecord], grid: ChipGrid,
                damage_classes: Iterable[int]) -> list[BuildingRecord]:
    """Keep only records whose chip holds at least one labelled building in ``damage_classes``."""
    if not records:
        raise GraphBuildError("prune_chips: empty input")
    damage = set(damage_classes)
    chips = [chip_id_of(r, grid) for r in records]
    damaged = {c for c, r in zip(chips, records) if r.label is not None and r.label in damage}
    return [r for c, r in zip(chips, records) if c in damaged]


# -- sampling ----------------------------------------------------------------

def largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Ties in the fractional remainder go to the earlier entry.
    """
    w = np.asarray(weights, dtype=np.float64)
    quota = total * w / w.sum()
    base = np.floor(quota + 1e-12).astype(int)
    rest = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda k: (-(quota[k] - base[k]), k))
    for k in order[:rest]:
        base[k] += 1
    return [int(v) for v in base]


def _strata(labels: Sequence[Optional[int]]) -> dict:
    groups = defaultdict(list)
    for i, y in enumerate(labels):
        groups[y].append(i)
    return dict(sorted(groups.items(), key=lambda kv: (kv[0] is None, kv[0] if kv[0] is not None else 0)))


def stratified_subsample(records: Sequence[BuildingRecord], cap: int, seed: int) -> list[BuildingRecord]:
    """Random subset of at most ``cap`` records with the class distribution preserved.

    Unlabelled records form their own stratum. Input order is kept.
    """
    groups = _strata([r.label for r in records])
    if cap < len(groups):
        raise GraphBuildError(f"cap {cap} is smaller than the {len(groups)} classes present")
    if cap >= len(records):
        return list(records)
    counts = largest_remainder(cap, [len(v) for v in groups.values()])
    rng = np.random.default_rng(seed)
    keep = []
    for idx, c in zip(groups.values(), counts):
        keep.extend(rng.permutation(idx)[:c].tolist())
    keep.sort()
    return [records[i] for i in keep]


@dataclass(frozen=True)
class ClassMap:
    mapping: tuple[int, ...]  # raw class index -> merged class index

    def __post_init__(self):
        m = tuple(int(v) for v in self.mapping)
        object.__setattr__(self, "mapping", m)
        if not m or set(m) != set(range(max(m) + 1)):
            raise ValueError(f"class map image must cover 0..K-1, got {m}")

    @property
    def k_raw(self) -> int:
        return len(self.mapping)

    @property
    def k_out(self) -> int:
        return max(self.mapping) + 1

    @classmethod
    def identity(cls, k: int) -> "ClassMap":
        return cls(tuple(range(k)))


# xBD: no / minor / major / destroyed -> major and destroyed merged
XBD_CLASS_MAP = ClassMap((0, 1, 2, 2))
# Beirut: minor / moderate / major / severe -> minor and moderate merged
BEIRUT_CLASS_MAP = ClassMap((0, 0, 1, 2))


def merge_classes(labels: Sequence[Optional[int]], cmap: ClassMap) -> list[Optional[int]]:
    out = []
    for y in labels:
        if y is None:
            out.append(None)
            continue
        if not 0 <= y < cmap.k_raw:
            raise GraphBuildError(f"label {y} outside raw class range 0..{cmap.k_raw - 1}")
        out.append(cmap.mapping[y])
    return out


@dataclass
class SplitAssignment:
    fractions: tuple[float, float, float]
    tags: list[Optional[str]]
    seed: int

    def mask(self, split: str) -> np.ndarray:
        return np.array([t == split for t in self.tags], dtype=bool)


def check_fractions(fractions: Sequence[float]) -> tuple[float, float, float]:
    f = tuple(float(v) for v in fractions)
    if len(f) != 3 or any(not v > 0 for v in f) or abs(sum(f) - 1.0) > 1e-9:
        raise GraphBuildError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    return f


def assign_splits(labels: Sequence[Optional[int]], fractions=DEFAULT_FRACTIONS, seed: int = 0,
                  fixed: Optional[Mapping[int, str]] = None) -> SplitAssignment:
    """Per-class shuffled train/test/hold partition with largest-remainder rounding.

    Unlabelled nodes get no split. ``fixed`` pins node tags before sampling;
    the remaining nodes of each class are split with the fractions renormalised
    over the splits that are not pinned (used to keep a hold set fixed).
    """
    fractions = check_fractions(fractions)
    tags: list[Optional[str]] = [None] * len(labels)
    fixed = dict(fixed or {})
    free_splits = [s for s in SPLITS if s not in set(fixed.values())]
    free_frac = [fractions[SPLITS.index(s)] for s in free_splits]
    for i, s in fixed.items():
        tags[i] = s
    rng = np.random.default_rng(seed)
    for y, idx in _strata(labels).items():
        if y is None:
            continue
        idx = [i for i in idx if i not in fixed]
        counts = largest_remainder(len(idx), free_frac)
        if min(counts) < 1:
            raise GraphBuildError(
                f"class {y} with {len(idx)} free members cannot fill every split {free_splits}")
        perm = rng.permutation(idx)
        start = 0
        for s, c in zip(free_splits, counts):
            for i in perm[start:start + c]:
                tags[int(i)] = s
            start += c
    return SplitAssignment(fractions, tags, seed)


# -- edge weights ------------------------------------------------------------

@dataclass(frozen=True)
class EdgeWeightConfig:
    sigma: Optional[float] = None  # None: mean descriptor distance over the edges
    descriptor_dims: int = 12

    def __post_init__(self):
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def node_descriptor(v: np.ndarray, crop_size: int = CROP_SIZE) -> np.ndarray:
    """Per-channel mean and std of the pre crop followed by the post crop (12 values)."""
    m = crop_size * crop_size * CHANNELS
    v = np.asarray(v, dtype=np.float64)
    pre = v[..., :m].reshape(v.shape[:-1] + (-1, CHANNELS))
    post = v[..., m:2 * m].reshape(v.shape[:-1] + (-1, CHANNELS))
    return np.concatenate([pre.mean(-2), pre.std(-2), post.mean(-2), post.std(-2)], axis=-1)


def edge_weight(d_i, d_j, cfg: EdgeWeightConfig) -> float:
    if cfg.sigma is None or not cfg.sigma > 0:
        raise ValueError("edge_weight needs a positive sigma")
    d2 = float(np.sum((np.asarray(d_i, float) - np.asarray(d_j, float)) ** 2))
    return max(math.exp(-d2 / (2.0 * cfg.sigma ** 2)), np.finfo(np.float64).tiny)


# -- graph -------------------------------------------------------------------

@dataclass
class BuildingGraph:
    ids: list[str]
    features: np.ndarray  # (n, D) float32
    labels: np.ndarray  # (n,) int64, -1 for unlabelled
    splits: list[Optional[str]]
    edges: np.ndarray  # (m, 2) int64, i < j
    weights: np.ndarray  # (m,) float64
    num_classes: int
    crop_size: int = CROP_SIZE
    config: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        n = len(self.ids)
        if len(set(self.ids)) != n:
            raise GraphBuildError("node ids must be unique")
        if self.features.shape[0] != n or len(self.labels) != n or len(self.splits) != n:
            raise GraphBuildError("node arrays disagree in length")
        if len(self.edges):
            if np.any(self.edges[:, 0] >= self.edges[:, 1]) or self.edges.max() >= n or self.edges.min() < 0:
                raise GraphBuildError("edges must satisfy 0 <= i < j < n")
            if len(np.unique(self.edges, axis=0)) != len(self.edges):
                raise GraphBuildError("duplicate edges")
        if len(self.weights) != len(self.edges) or np.any(self.weights <= 0) or np.any(self.weights > 1):
            raise GraphBuildError("edge weights must lie in (0, 1], one per edge")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def crop_dim(self) -> int:
        return self.crop_size * self.crop_size * CHANNELS

    @property
    def meta_dim(self) -> int:
        return self.features.shape[1] - 2 * self.crop_dim

    def mask(self, split: str) -> np.ndarray:
        if split == "full":
            return self.labels >= 0
        return np.array([s == split for s in self.splits], dtype=bool)

    def with_splits(self, splits: Sequence[Optional[str]]) -> "BuildingGraph":
        return BuildingGraph(self.ids, self.features, self.labels, list(splits), self.edges,
                             self.weights, self.num_classes, self.crop_size, dict(self.config))

    def without_edges(self) -> "BuildingGraph":
        return BuildingGraph(self.ids, self.features, self.labels, list(self.splits),
                             np.zeros((0, 2), np.int64), np.zeros(0), self.num_classes,
                             self.crop_size, dict(self.config))


def save_graph(graph: BuildingGraph, path: str | Path) -> None:
    """Write the BLDG container: magic, u16 version, u64 header length, JSON header, float32 block."""
    header = {
        "ids": graph.ids,
        "labels": [int(v) for v in graph.labels],
        "splits": graph.splits,
        "edges": [[int(i), int(j), float(w)] for (i, j), w in zip(graph.edges, graph.weights)],
        "num_classes": graph.num_classes,
        "crop_size": graph.crop_size,
        "shape": list(graph.features.shape),
        "config": graph.config,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(GRAPH_MAGIC)
        fh.write(struct.pack("<HQ", GRAPH_VERSION, len(blob)))
        fh.write(blob)
        fh.write(graph.features.astype("<f4", copy=False).tobytes(order="C"))


def load_graph(path: str | Path) -> BuildingGraph:
    path = Path(path)
    if not path.exists():
        raise GraphBuildError(f"graph file not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(4) != GRAPH_MAGIC:
            raise GraphBuildError(f"{path} is not a BLDG graph file")
        version, hlen = struct.unpack("<HQ", fh.read(10))
        if version != GRAPH_VERSION:
            raise GraphBuildError(f"unsupported graph format version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        shape = tuple(header["shape"])
        feats = np.frombuffer(fh.read(), dtype="<f4")
    if feats.size != int(np.prod(shape)):
        raise GraphBuildError(f"{path}: truncated feature block")
    e = np.array([[i, j] for i, j, _ in header["edges"]], dtype=np.int64).reshape(-1, 2)
    w = np.array([x for _, _, x in header["edges"]], dtype=np.float64)
    return BuildingGraph(header["ids"], feats.reshape(shape).astype(np.float32), header["labels"],
                         header["splits"], e, w, header["num_classes"], header["crop_size"],
                         header.get("config", {}))


@dataclass
class GraphConfig:
    buffer: float = 5.0
    crop_size: int = CROP_SIZE
    edge_weight: EdgeWeightConfig = field(default_factory=EdgeWeightConfig)
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    num_classes: Optional[int] = None  # defaults to max label + 1
    seed: int = 0


def nearest_neighbor_chain(xy: np.ndarray) -> list[tuple[int, int]]:
    """Greedy path from node 0 through successive nearest unvisited nodes."""
    n = len(xy)
    if n < 2:
        return []
    left = np.ones(n, dtype=bool)
    left[0] = False
    cur, edges = 0, []
    for _ in range(n - 1):
        d = np.sum((xy - xy[cur]) ** 2, axis=1)
        d[~left] = np.inf
        nxt = int(np.argmin(d))
        edges.append((min(cur, nxt), max(cur, nxt)))
        left[nxt] = False
        cur = nxt
    return sorted(set(edges))


def dedupe_points(xy: np.ndarray) -> np.ndarray:
    """Nudge repeated coordinates so every point is distinct (later points move)."""
    xy = np.array(xy, dtype=np.float64)
    seen = set()
    for i in range(len(xy)):
        key = (xy[i, 0], xy[i, 1])
        while key in seen:
            xy[i, 0] += DUPLICATE_NUDGE
            key = (xy[i, 0], xy[i, 1])
        seen.add(key)
    return xy


def connectivity_edges(xy: np.ndarray) -> list[tuple[int, int]]:
    """Delaunay edges over ``xy``, or a nearest-neighbour chain for degenerate layouts."""
    xy = dedupe_points(xy)
    try:
        return geo.triangulation_edges(geo.delaunay(xy))
    except geo.DegenerateGeometryError:
        return nearest_neighbor_chain(xy)


def build_graph(records: Sequence[BuildingRecord], pre: RasterImage, post: RasterImage,
                schema: Optional[MetaSchema] = None, cfg: Optional[GraphConfig] = None) -> BuildingGraph:
    """Assemble the region graph: one node per record, weighted Delaunay edges, splits."""
    cfg = cfg or GraphConfig()
    if not records:
        raise GraphBuildError("build_graph: no records")
    envs = [geo.buffered_envelope(r.polygon, cfg.buffer) for r in records]
    xy = np.array([(c.x, c.y) for c in map(geo.centroid, envs)])
    edges = np.array(connectivity_edges(xy), dtype=np.int64).reshape(-1, 2)

    pres = [extract_crop(pre, e, cfg.crop_size) for e in envs]
    posts = [extract_crop(post, e, cfg.crop_size) for e in envs]
    metas = [encode_meta(r, schema) for r in records] if schema is not None else None
    feats = feature_matrix(pres, posts, metas)

    desc = node_descriptor(feats, cfg.crop_size)
    sigma = cfg.edge_weight.sigma
    if len(edges):
        dist = np.linalg.norm(desc[edges[:, 0]] - desc[edges[:, 1]], axis=1)
        if sigma is None:
            sigma = float(dist.mean()) if dist.mean() > 0 else 1.0
        weights = np.maximum(np.exp(-dist ** 2 / (2.0 * sigma ** 2)), np.finfo(np.float64).tiny)
    else:
        weights = np.zeros(0)

    labels = [r.label for r in records]
    known = [y for y in labels if y is not None]
    k = cfg.num_classes or (max(known) + 1 if known else 2)
    if known and (min(known) < 0 or max(known) >= k):
        raise GraphBuildError(f"labels fall outside 0..{k - 1}")
    splits = assign_splits(labels, cfg.fractions, cfg.seed).tags if known else [None] * len(records)

    echo = {
        "buffer": cfg.buffer,
        "crop_size": cfg.crop_size,
        "sigma": sigma,
        "fractions": list(cfg.fractions),
        "seed": cfg.seed,
        "meta": schema is not None,
    }
    return BuildingGraph(
        ids=[r.id for r in records],
        features=feats,
        labels=[-1 if y is None else y for y in labels],
        splits=splits,
        edges=edges,
        weights=weights,
        num_classes=k,
        crop_size=cfg.crop_size,
        config=echo,
    )


def prepare_records(records: Sequence[BuildingRecord], *, grid: Optional[ChipGrid] = None,
                    damage_classes: Optional[Iterable[int]] = None, class_map: Optional[ClassMap] = None,
                    subsample_cap: Optional[int] = None, seed: int = 0) -> list[BuildingRecord]:
    """Optional pruning, subsampling and class merging, in that order."""
    out = list(records)
    if grid is not None and damage_classes is not None:
        out = prune_chips(out, grid, damage_classes)
    if subsample_cap is not None:
        out = stratified_subsample(out, subsample_cap, seed)
    if class_map is not None:
        merged = merge_classes([r.label for r in out], class_map)
        out = [BuildingRecord(r.id, r.polygon, y, r.chip_id, dict(r.meta_raw)) for r, y in zip(out, merged)]
    return out

