"""Paired significance tests on repeated runs.

Two configurations are trained on many shared train/test resamplings with a
fixed hold set, and the per-run differences are tested with a paired
t-test and the Wilcoxon signed-rank test. Here the runs are short so the
script finishes quickly; the numbers illustrate the report, not a finding.

Run with ``python demos/04_significance.py``.
"""
from bldgraph.evaluation import compare_models, paired_t_test, wilcoxon_signed_rank
from bldgraph.graphbuild import GraphConfig
from bldgraph.neuralcore import ModelConfig
from bldgraph.pipeline import graph_from_source
from bldgraph.synth import CityConfig
from bldgraph.training import TrainConfig

# The tests on their own: differences of 1..5 are clearly positive.
print("t-test  ", paired_t_test([1, 2, 3, 4, 5], [0, 0, 0, 0, 0]))
print("wilcoxon", wilcoxon_signed_rank([1, 2, 3, 4, 5], [0, 0, 0, 0, 0]))

CROP = 16
graph = graph_from_source(CityConfig(n_buildings=120, extent=400, seed=1), GraphConfig(crop_size=CROP, seed=1))
full = TrainConfig(epochs=40, model=ModelConfig(channels=(4, 8), crop_size=CROP))
ablated = TrainConfig(epochs=40, model=ModelConfig(channels=(4, 8), crop_size=CROP, adjacency="identity"))
report = compare_models(full, ablated, graph, runs=6, seed=1)
for name, c in report.metrics.items():
    print(f"{name:12s} mean diff {c.mean_difference:+.3f}  t p={c.t_p:.3f}  wilcoxon p={c.w_p:.3f}")
