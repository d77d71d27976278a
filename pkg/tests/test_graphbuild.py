import math
from collections import Counter

import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components
import scipy.sparse as sp

from bldgraph import graphbuild as gb
from bldgraph.geometry import Point
from bldgraph.synth import CityConfig, make_scenario

from conftest import flat_raster, record


def test_prune_chips_rules():
    grid = gb.ChipGrid(Point(0, 0), 100.0)
    clean = [record(i, 10 + i, 10, label=0) for i in range(5)]  # chip 0_0
    mixed = [record(100 + i, 110 + i, 10, label=0) for i in range(49)] + [record(999, 150, 50, label=2)]  # chip 1_0
    kept = gb.prune_chips(clean + mixed, grid, {1, 2, 3})
    assert [r.id for r in kept] == [r.id for r in mixed]
    assert gb.prune_chips(clean, grid, {1, 2, 3}) == []


def test_prune_chips_uses_explicit_chip_ids():
    recs = [record(0, 0, 0, label=0, chip="a"), record(1, 500, 500, label=1, chip="a"),
            record(2, 5, 5, label=0, chip="b")]
    assert [r.id for r in gb.prune_chips(recs, gb.ChipGrid(), {1})] == ["b0", "b1"]


def test_prune_chips_empty_input():
    with pytest.raises(gb.GraphBuildError):
        gb.prune_chips([], gb.ChipGrid(), {1})


def test_largest_remainder():
    assert gb.largest_remainder(10, [50, 30, 20]) == [5, 3, 2]
    assert gb.largest_remainder(10, [0.2, 0.1, 0.7]) == [2, 1, 7]
    assert sum(gb.largest_remainder(7, [1, 1, 1])) == 7


def test_stratified_subsample():
    recs = [record(i, i * 20, 0, label=0 if i < 80 else 1) for i in range(100)]
    assert gb.stratified_subsample(recs, 200, 0) == recs
    sub = gb.stratified_subsample(recs, 50, 0)
    assert Counter(r.label for r in sub) == {0: 40, 1: 10}
    recs3 = [record(i, i * 20, 0, label=0 if i < 50 else (1 if i < 80 else 2)) for i in range(100)]
    assert Counter(r.label for r in gb.stratified_subsample(recs3, 10, 1)) == {0: 5, 1: 3, 2: 2}
    assert gb.stratified_subsample(recs3, 10, 1) == gb.stratified_subsample(recs3, 10, 1)


def test_merge_classes():
    assert gb.merge_classes([3, 0, None], gb.XBD_CLASS_MAP) == [2, 0, None]
    assert gb.merge_classes([1], gb.BEIRUT_CLASS_MAP) == [0]
    assert gb.merge_classes([0, 1, 2], gb.ClassMap.identity(3)) == [0, 1, 2]
    with pytest.raises(gb.GraphBuildError):
        gb.merge_classes([4], gb.XBD_CLASS_MAP)
    with pytest.raises(ValueError):
        gb.ClassMap((0, 2))


def _sizes(tags, labels=None, cls=None):
    sel = [t for t, y in zip(tags, labels or tags) if cls is None or y == cls]
    return tuple(sel.count(s) for s in ("train", "test", "hold"))


def test_assign_splits_single_class():
    a = gb.assign_splits([0] * 10, (0.2, 0.1, 0.7), 0)
    assert _sizes(a.tags) == (2, 1, 7)


def test_assign_splits_per_class():
    labels = [0] * 100 + [1] * 10
    a = gb.assign_splits(labels, (0.2, 0.1, 0.7), 3)
    assert _sizes(a.tags, labels, 0) == (20, 10, 70)
    assert _sizes(a.tags, labels, 1) == (2, 1, 7)


def test_assign_splits_unlabelled_and_errors():
    a = gb.assign_splits([None, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], seed=1)
    assert a.tags[0] is None
    with pytest.raises(gb.GraphBuildError):
        gb.assign_splits([0] * 10, (0.2, 0.1, 0.6))
    with pytest.raises(gb.GraphBuildError):
        gb.assign_splits([0, 0], (0.2, 0.1, 0.7))


def test_assign_splits_fixed_hold():
    labels = [i % 2 for i in range(40)]
    base = gb.assign_splits(labels, seed=0)
    hold = {i: "hold" for i, t in enumerate(base.tags) if t == "hold"}
    other = gb.assign_splits(labels, seed=99, fixed=hold)
    assert [t == "hold" for t in other.tags] == [t == "hold" for t in base.tags]
    assert other.mask("train").sum() == 8 and other.mask("test").sum() == 4


def test_node_descriptor(rng):
    v = np.full(2 * 8 * 8 * 3, 0.5)
    d = gb.node_descriptor(v, 8)
    np.testing.assert_allclose(d, [0.5] * 3 + [0] * 3 + [0.5] * 3 + [0] * 3)
    crop = rng.random(8 * 8 * 3)
    d = gb.node_descriptor(np.concatenate([crop, crop]), 8)
    np.testing.assert_array_equal(d[:6], d[6:])
    pre, post = rng.random((2, 8, 8, 3))
    d = gb.node_descriptor(np.concatenate([pre.ravel(), post.ravel()]), 8)
    brute = []
    for img in (pre, post):
        px = img.reshape(-1, 3)
        brute += [sum(px[:, c]) / 64 for c in range(3)]
        brute += [math.sqrt(sum((px[:, c] - px[:, c].mean()) ** 2) / 64) for c in range(3)]
    np.testing.assert_allclose(d, brute[:3] + brute[3:6] + brute[6:9] + brute[9:], atol=1e-6)


def test_edge_weight():
    cfg = gb.EdgeWeightConfig(sigma=2.0)
    assert gb.edge_weight(np.ones(12), np.ones(12), cfg) == 1.0
    d = np.zeros(12)
    d[0] = 2.0
    assert gb.edge_weight(np.zeros(12), d, cfg) == pytest.approx(math.exp(-0.5), abs=1e-12)
    far = gb.edge_weight(np.zeros(12), np.full(12, 1e3), cfg)
    assert 0 < far < 1e-300


def test_build_graph_three_buildings():
    recs = [record(i, x, y) for i, (x, y) in enumerate([(0, 0), (60, 0), (30, 50)])]
    g = gb.build_graph(recs, flat_raster(), flat_raster(), None, gb.GraphConfig(crop_size=8))
    assert g.n == 3 and len(g.edges) == 3
    assert np.all((g.weights > 0) & (g.weights <= 1))
    assert g.features.shape == (3, 2 * 8 * 8 * 3)


def test_build_graph_two_buildings_single_edge():
    recs = [record(0, 0, 0), record(1, 40, 0)]
    g = gb.build_graph(recs, flat_raster(), flat_raster(), None, gb.GraphConfig(crop_size=8))
    assert g.edges.tolist() == [[0, 1]]
    assert g.splits == [None, None]


def test_build_graph_collinear_fallback():
    recs = [record(i, 20 * i, 0) for i in range(5)]
    g = gb.build_graph(recs, flat_raster(), flat_raster(), None, gb.GraphConfig(crop_size=8))
    assert len(g.edges) == 4


def test_build_graph_synthetic_planar_and_connected():
    sc = make_scenario(CityConfig(n_buildings=200, seed=4))
    g = gb.build_graph(sc.records, sc.pre, sc.post, None, gb.GraphConfig(crop_size=8, seed=4))
    assert g.n == 200 and len(g.edges) <= 3 * 200 - 6
    a = sp.coo_matrix((np.ones(len(g.edges)), (g.edges[:, 0], g.edges[:, 1])), shape=(200, 200))
    assert connected_components(a, directed=False)[0] == 1


def test_graph_round_trip(tmp_path):
    sc = make_scenario(CityConfig(n_buildings=80, extent=400, seed=2))
    g = gb.build_graph(sc.records, sc.pre, sc.post, None, gb.GraphConfig(crop_size=8, seed=2))
    gb.save_graph(g, tmp_path / "g.bldg")
    h = gb.load_graph(tmp_path / "g.bldg")
    assert h.ids == g.ids and h.splits == g.splits and h.num_classes == g.num_classes
    assert np.array_equal(h.features, g.features) and np.array_equal(h.labels, g.labels)
    assert np.array_equal(h.edges, g.edges) and np.array_equal(h.weights, g.weights)
    gb.save_graph(h, tmp_path / "h.bldg")
    assert (tmp_path / "g.bldg").read_bytes() == (tmp_path / "h.bldg").read_bytes()


def test_load_graph_errors(tmp_path):
    with pytest.raises(gb.GraphBuildError, match="not found"):
        gb.load_graph(tmp_path / "none.bldg")
    (tmp_path / "bad.bldg").write_bytes(b"XXXX")
    with pytest.raises(gb.GraphBuildError, match="not a BLDG"):
        gb.load_graph(tmp_path / "bad.bldg")


def test_graph_validation():
    with pytest.raises(gb.GraphBuildError):
        gb.BuildingGraph(["a", "a"], np.zeros((2, 4)), [0, 0], [None, None], np.zeros((0, 2)), [], 2, 1)
    with pytest.raises(gb.GraphBuildError):
        gb.BuildingGraph(["a", "b"], np.zeros((2, 6)), [0, 0], [None, None], [[1, 0]], [0.5], 2, 1)


def test_prepare_records_pipeline_order():
    grid = gb.ChipGrid(Point(0, 0), 100.0)
    recs = [record(i, 10 + i, 10, label=0) for i in range(5)]
    recs += [record(10 + i, 110 + 2 * i, 10, label=i % 4) for i in range(20)]
    out = gb.prepare_records(recs, grid=grid, damage_classes={1, 2, 3}, class_map=gb.XBD_CLASS_MAP,
                             subsample_cap=8, seed=0)
    assert len(out) == 8
    assert {r.label for r in out} <= {0, 1, 2}
    assert all(int(r.id[1:]) >= 10 for r in out)
