"""Stage wiring shared by the CLI, the demos and :func:`bldgraph.training.run_experiment`."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import PipelineConfig
from .graphbuild import BuildingGraph, GraphConfig, build_graph, prepare_records
from .ingest import BuildingRecord, MetaSchema, RasterImage, load_footprints, load_raster
from .synth import CityConfig, Scenario, make_scenario, read_scenario

log = logging.getLogger(__name__)


@dataclass
class Region:
    records: list[BuildingRecord]
    pre: RasterImage
    post: RasterImage


def scenario_for(cfg: PipelineConfig) -> Scenario:
    return make_scenario(cfg.data.synth.city(cfg.seed))


def load_region(cfg: PipelineConfig) -> Region:
    """Footprints and rasters named in ``cfg.data``, or the configured synthetic city."""
    d = cfg.data
    if d.footprints is None:
        sc = scenario_for(cfg)
        return Region(sc.records, sc.pre, sc.post)
    records = load_footprints(d.footprints, label_key=d.label_key, meta_key=d.meta_key,
                              chip_key=d.chip_key or "chip_id", id_key=d.id_key)
    return Region(records, load_raster(d.pre), load_raster(d.post))


def region_from_dir(path: str | Path) -> Region:
    sc = read_scenario(path)
    return Region(sc.records, sc.pre, sc.post)


def graph_for(region: Region, cfg: PipelineConfig) -> BuildingGraph:
    """Prune, subsample, merge classes, then build the weighted Delaunay graph."""
    g = cfg.graph
    seed = cfg.seed if g.seed is None else g.seed
    labels = [r.label for r in region.records if r.label is not None]
    damaged = g.damaged_classes
    if damaged is None and labels:
        damaged = tuple(range(1, max(labels) + 1))
    records = prepare_records(region.records,
                              grid=g.grid() if g.prune else None,
                              damage_classes=damaged if g.prune else None,
                              class_map=g.class_map_obj(), subsample_cap=g.subsample_cap, seed=seed)
    cmap = g.class_map_obj()
    k = cmap.k_out if cmap is not None else None
    schema = MetaSchema.calibrate(records) if g.meta else None
    graph = build_graph(records, region.pre, region.post, schema, g.build_config(seed, k))
    if schema is not None:
        graph.config["meta_schema"] = schema.to_json()
    log.info("graph: %d nodes, %d edges, %d classes", graph.n, len(graph.edges), graph.num_classes)
    return graph


def graph_from_source(source, graph_cfg: Optional[GraphConfig] = None, *, meta: bool = False,
                      fractions: Sequence[float] = (0.2, 0.1, 0.7), seed: int = 0) -> BuildingGraph:
    """Graph for a Scenario, CityConfig or scenario directory, built with ``graph_cfg``."""
    if isinstance(source, CityConfig):
        source = make_scenario(source)
    elif isinstance(source, (str, Path)):
        source = read_scenario(source)
    if not isinstance(source, Scenario):
        raise TypeError(f"cannot build a graph from {type(source).__name__}")
    gc = graph_cfg or GraphConfig(fractions=tuple(fractions), seed=seed)
    schema = MetaSchema.calibrate(source.records) if meta else None
    return build_graph(source.records, source.pre, source.post, schema, gc)


__all__ = ["Region", "load_region", "region_from_dir", "graph_for", "graph_from_source", "scenario_for"]
