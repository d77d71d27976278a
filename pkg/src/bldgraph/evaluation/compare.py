"""Repeated paired training runs of two configurations with significance tests."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..graphbuild import BuildingGraph, assign_splits
from .metrics import METRICS
from .stats import DegenerateSampleError, paired_t_test, wilcoxon_signed_rank

log = logging.getLogger(__name__)

ALPHA = 0.05


@dataclass
class MetricComparison:
    a: list[float]
    b: list[float]
    differences: list[float]
    mean_difference: float
    t: float
    t_p: float
    w: float
    w_p: float
    t_significant: bool
    w_significant: bool

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ComparisonReport:
    runs: int
    split: str
    metrics: dict[str, MetricComparison]
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"runs": self.runs, "split": self.split, "alpha": ALPHA,
                "metrics": {m: c.to_json() for m, c in self.metrics.items()}, "extra": self.extra}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def compare_metric(a, b) -> MetricComparison:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    try:
        res = paired_t_test(a, b)
        t, t_p = res.t, res.p
    except DegenerateSampleError:
        if np.all(d == 0):
            t, t_p = 0.0, 1.0
        else:
            t, t_p = float(np.sign(d.mean()) * np.inf), 0.0  # identical nonzero differences
    try:
        wr = wilcoxon_signed_rank(a, b)
        w, w_p = wr.w, wr.p
    except DegenerateSampleError:
        w, w_p = 0.0, 1.0  # identical samples: nothing to rank
    return MetricComparison([float(v) for v in a], [float(v) for v in b], [float(v) for v in d],
                            float(d.mean()), t, t_p, w, w_p, t_p < ALPHA, w_p < ALPHA)


def run_seed(seed: int, run: int) -> int:
    """Independent 32-bit seed for run ``run`` of a comparison seeded with ``seed``."""
    return int(np.random.SeedSequence([seed, run]).generate_state(1)[0])


def fixed_hold(graph: BuildingGraph, fractions, seed: int) -> dict[int, str]:
    """Hold membership used by every run: the graph's own, or a fresh one if it has none."""
    if graph.mask("hold").any():
        tags = graph.splits
    else:
        labels = [None if y < 0 else int(y) for y in graph.labels]
        tags = assign_splits(labels, fractions, seed).tags
    return {i: "hold" for i, t in enumerate(tags) if t == "hold"}


def compare_models(cfg_a, cfg_b, graph: BuildingGraph, runs: int = 30, seed: int = 0,
                   split: str = "hold", workers: int = 1, baseline_graph: Optional[BuildingGraph] = None
                   ) -> ComparisonReport:
    """Train both configurations on ``runs`` shared train/test resamplings and test the differences.

    The hold set is fixed once; per run the remaining labelled nodes are
    re-partitioned into train and test, and both configurations are trained
    on that same partition with the same seed. Differences are A - B on
    ``split``. ``baseline_graph`` optionally gives B its own node features
    (same nodes, e.g. without meta); it defaults to ``graph``.
    """
    if runs < 2:
        raise ValueError("compare_models needs at least two runs")
    hold = fixed_hold(graph, cfg_a.fractions, seed)
    graph_b = baseline_graph or graph
    if graph_b.ids != graph.ids:
        raise ValueError("baseline graph must have the same nodes")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(_paired, graph, graph_b, cfg_a, cfg_b, hold, seed, r, split) for r in range(runs)]
            results = [f.result() for f in futs]
    else:
        results = [_paired(graph, graph_b, cfg_a, cfg_b, hold, seed, r, split) for r in range(runs)]
    report = {}
    for m in METRICS:
        a = [res[0][m] for res in results]
        b = [res[1][m] for res in results]
        report[m] = compare_metric(a, b)
    return ComparisonReport(runs, split, report, {"seed": seed, "hold_size": len(hold)})


def _paired(graph, graph_b, cfg_a, cfg_b, hold, seed, run, split):
    from ..training import evaluate, fit  # deferred: training imports evaluation
    labels = [None if y < 0 else int(y) for y in graph.labels]
    rs = run_seed(seed, run)
    tags = assign_splits(labels, cfg_a.fractions, rs, fixed=hold).tags
    out = []
    for g, cfg in ((graph, cfg_a), (graph_b, cfg_b)):
        g = g.with_splits(tags)
        ck, _ = fit(g, replace(cfg, seed=rs))
        out.append(evaluate(g, ck, (split,))[split])
    log.info("run %d: %s f1 A=%.4f B=%.4f", run, split, out[0]["f1"], out[1]["f1"])
    return out
