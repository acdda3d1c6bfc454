import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spagan.graph import (Dataset, LoadError, SparseGraph, SplitSpec, degree, load_dataset,
                          neighbor_segments, planetoid_split, save_dataset, synthetic_citation_dataset)

from conftest import random_graph


def write_dataset(root, n=5, f=3, edges=((0, 1), (1, 2)), labels=None, splits=None, rows=None, **meta):
    root.mkdir(parents=True, exist_ok=True)
    m = {"num_nodes": n, "num_features": f, "num_classes": 2, "feature_file": "features.bin",
         "feature_dtype": "f32", "name": "tiny"}
    m.update(meta)
    (root / "meta.json").write_text(json.dumps(m))
    np.arange((n if rows is None else rows) * f, dtype="<f4").tofile(root / "features.bin")
    (root / "edges.csv").write_text("".join(f"{a},{b}\n" for a, b in edges))
    labels = [i % 2 for i in range(n)] if labels is None else labels
    (root / "labels.csv").write_text("".join(f"{y}\n" for y in labels))
    splits = splits or {"train": [0], "val": [1], "test": [2]}
    (root / "splits.json").write_text(json.dumps(splits))
    return root


def test_from_edges_symmetrizes_and_collapses():
    g = SparseGraph.from_edges(4, [(0, 1), (1, 0), (2, 1), (2, 2), (0, 1)])
    assert g.num_edges == 4
    assert g.num_undirected_edges == 2
    assert list(g.neighbors(1)) == [0, 2]
    assert degree(g, 2) == 1
    assert degree(g, 3) == 0


def test_degree_out_of_range():
    g = SparseGraph.from_edges(2, [(0, 1)])
    with pytest.raises(IndexError):
        degree(g, 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 15), st.lists(st.tuples(st.integers(0, 14), st.integers(0, 14)), max_size=40))
def test_csr_invariants(n, pairs):
    pairs = [(a % n, b % n) for a, b in pairs]
    g = SparseGraph.from_edges(n, pairs)
    assert g.indptr.size == n + 1
    assert np.all(np.diff(g.indptr) >= 0)
    assert np.all((g.indices >= 0) & (g.indices < n))
    stored = set(zip(g.edge_sources().tolist(), g.indices.tolist()))
    assert len(stored) == g.num_edges
    assert all((j, i) in stored for i, j in stored)
    assert all(i != j for i, j in stored)
    assert stored == {(a, b) for a, b in pairs if a != b} | {(b, a) for a, b in pairs if a != b}


def test_neighbor_segments_two_nodes():
    pairs, seg = neighbor_segments(SparseGraph.from_edges(2, [(0, 1)]), include_self=True)
    assert pairs.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert seg.groups.tolist() == [0, 0, 1, 1]


def test_neighbor_segments_isolated_node():
    pairs, seg = neighbor_segments(SparseGraph.from_edges(3, [(0, 1)]), include_self=True)
    assert [p for p in pairs.tolist() if p[0] == 2] == [[2, 2]]
    pairs, seg = neighbor_segments(SparseGraph.from_edges(3, [(0, 1)]), include_self=False)
    assert seg.counts.tolist() == [1, 1, 0]


def test_neighbor_segment_sizes_match_degree(rng):
    g = random_graph(rng, 10, 0.3)
    edges = g.undirected_pairs()
    recount = np.bincount(edges.ravel(), minlength=10)
    for with_self in (False, True):
        pairs, seg = neighbor_segments(g, include_self=with_self)
        assert np.array_equal(seg.counts, recount + int(with_self))
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        assert np.array_equal(order, np.arange(len(pairs)))


def test_load_single_node_no_edges(tmp_path):
    root = write_dataset(tmp_path / "one", n=1, edges=(), splits={"train": [0], "val": [], "test": []})
    ds = load_dataset(root)
    assert ds.num_nodes == 1
    assert degree(ds.graph, 0) == 0


def test_load_reports_row_mismatch(tmp_path):
    root = write_dataset(tmp_path / "bad", n=5, rows=4)
    with pytest.raises(LoadError) as info:
        load_dataset(root)
    assert info.value.field == "features"


@pytest.mark.parametrize("mutate, field", [
    (lambda r: (r / "labels.csv").unlink(), "labels"),
    (lambda r: (r / "edges.csv").write_text("0,9\n"), "edges"),
    (lambda r: (r / "labels.csv").write_text("0\n1\n5\n0\n1\n"), "labels"),
    (lambda r: (r / "splits.json").write_text('{"train": [0], "val": [0], "test": [2]}'), "splits"),
    (lambda r: (r / "splits.json").write_text('{"train": [0], "val": [1]}'), "splits.test"),
    (lambda r: (r / "meta.json").write_text("{not json"), "meta.json"),
    (lambda r: (r / "edges.csv").write_text("0;1\n"), "edges"),
])
def test_load_errors_name_the_field(tmp_path, mutate, field):
    root = write_dataset(tmp_path / "d")
    mutate(root)
    with pytest.raises(LoadError) as info:
        load_dataset(root)
    assert info.value.field == field


def test_round_trip(tmp_path):
    ds = synthetic_citation_dataset(num_nodes=200, num_classes=3, num_features=20, num_val=30,
                                    num_test=40, seed=3)
    again = load_dataset(save_dataset(ds, tmp_path / "rt"))
    assert np.array_equal(again.graph.indptr, ds.graph.indptr)
    assert np.array_equal(again.graph.indices, ds.graph.indices)
    assert np.array_equal(again.features, ds.features.astype(np.float32))
    assert np.array_equal(again.labels, ds.labels)
    for s in ("train", "val", "test"):
        assert np.array_equal(getattr(again, s), getattr(ds, s))
    assert again.name == ds.name


def test_summary_reports_both_edge_counts(tmp_path):
    root = write_dataset(tmp_path / "d", edges=((0, 1), (1, 0), (1, 2), (3, 3)))
    s = load_dataset(root).summary()
    assert s["raw_edge_pairs"] == 4
    assert s["undirected_edges"] == 2
    assert s["directed_edges"] == 4


def test_planetoid_split_sizes():
    labels = np.repeat(np.arange(7), 300)
    split = planetoid_split(labels, 7, rng=0)
    assert len(split.train) == 140 and len(split.val) == 500 and len(split.test) == 1000
    assert np.all(np.bincount(labels[split.train]) == 20)
    split.validate(len(labels))


def test_dataset_validate_rejects_overlap():
    g = SparseGraph.from_edges(3, [])
    ds = Dataset(g, np.zeros((3, 1)), np.zeros(3, dtype=int), SplitSpec(np.array([0]), np.array([0]),
                                                                        np.array([1])), 1)
    with pytest.raises(LoadError):
        ds.validate()
