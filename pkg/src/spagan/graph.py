"""Sparse graph storage, the on-disk dataset format, and split handling.

Dataset directory layout (binary data little-endian)::

    meta.json     {"num_nodes", "num_features", "num_classes", "feature_file",
                   "feature_dtype": "f32", optional "name"}
    edges.csv     "src,dst" per line, zero-indexed, each undirected pair once
    features.bin  row-major N x F float32
    labels.csv    one class id per line, N lines
    splits.json   {"train": [...], "val": [...], "test": [...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import SegmentIndex

log = logging.getLogger(__name__)


class LoadError(ValueError):
    """Malformed dataset directory. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True, eq=False)
class SparseGraph:
    """Symmetric directed graph in CSR form. Self-loops are never stored."""

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    raw_edge_count: int = 0

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "SparseGraph":
        """Build from undirected pairs: symmetrize, drop self-loops, collapse duplicates."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        raw = len(e)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            raise IndexError("edge endpoint out of range")
        loops = e[:, 0] == e[:, 1]
        if loops.any():
            log.warning("dropping %d self-loop(s)", int(loops.sum()))
            e = e[~loops]
        both = np.concatenate([e, e[:, ::-1]])
        key = both[:, 0] * num_nodes + both[:, 1]
        uniq = np.unique(key)
        if len(uniq) != len(both) and len(e):
            n_dup = (len(both) - len(uniq)) // 2
            if n_dup:
                log.warning("collapsed %d duplicate undirected edge(s)", n_dup)
        src, dst = uniq // num_nodes, uniq % num_nodes
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=num_nodes), out=indptr[1:])
        return cls(num_nodes, indptr, dst.astype(np.int64), raw_edge_count=raw)

    @property
    def num_edges(self) -> int:
        """Number of stored directed edges."""
        return int(self.indices.size)

    @property
    def num_undirected_edges(self) -> int:
        return self.num_edges // 2

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    def degree(self, i: int) -> int:
        if not 0 <= i < self.num_nodes:
            raise IndexError(f"node {i} out of range [0, {self.num_nodes})")
        return int(self.indptr[i + 1] - self.indptr[i])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def edge_sources(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def edge_position(self, i: int, j: int) -> int:
        """Index of directed edge (i, j) in CSR order, or -1."""
        lo, hi = self.indptr[i], self.indptr[i + 1]
        k = lo + np.searchsorted(self.indices[lo:hi], j)
        return int(k) if k < hi and self.indices[k] == j else -1

    def undirected_pairs(self) -> np.ndarray:
        src = self.edge_sources()
        keep = src < self.indices
        return np.stack([src[keep], self.indices[keep]], axis=1)


def degree(graph: SparseGraph, i: int) -> int:
    return graph.degree(i)


def neighbor_segments(graph: SparseGraph, include_self: bool = True):
    """Return ``(pairs, segments)`` with pairs sorted by (i, j) and grouped by i."""
    src = graph.edge_sources()
    dst = graph.indices
    if include_self:
        nodes = np.arange(graph.num_nodes)
        src = np.concatenate([src, nodes])
        dst = np.concatenate([dst, nodes])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
    pairs = np.stack([src, dst], axis=1)
    return pairs, SegmentIndex(src, graph.num_nodes)


@dataclass(frozen=True)
class SplitSpec:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def validate(self, num_nodes: int) -> None:
        for name in ("train", "val", "test"):
            ids = getattr(self, name)
            if ids.size and (ids.min() < 0 or ids.max() >= num_nodes):
                raise LoadError(f"splits.{name}", "node id out of range")
            if len(np.unique(ids)) != len(ids):
                raise LoadError(f"splits.{name}", "duplicate node id")
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            if np.intersect1d(getattr(self, a), getattr(self, b)).size:
                raise LoadError("splits", f"{a} and {b} overlap")


@dataclass(eq=False)
class Dataset:
    graph: SparseGraph
    features: np.ndarray
    labels: np.ndarray
    splits: SplitSpec
    num_classes: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def train(self) -> np.ndarray:
        return self.splits.train

    @property
    def val(self) -> np.ndarray:
        return self.splits.val

    @property
    def test(self) -> np.ndarray:
        return self.splits.test

    def validate(self) -> None:
        n = self.graph.num_nodes
        if self.features.shape[0] != n:
            raise LoadError("features", f"{self.features.shape[0]} rows for {n} nodes")
        if self.labels.shape != (n,):
            raise LoadError("labels", f"{self.labels.shape[0]} labels for {n} nodes")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LoadError("labels", f"class id outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise LoadError("features", "non-finite value")
        self.splits.validate(n)

    def summary(self) -> dict:
        return {
            "name": self.name,
            "num_nodes": self.num_nodes,
            "num_features": self.num_features,
            "num_classes": self.num_classes,
            "raw_edge_pairs": self.graph.raw_edge_count,
            "undirected_edges": self.graph.num_undirected_edges,
            "directed_edges": self.graph.num_edges,
            "train": len(self.train),
            "val": len(self.val),
            "test": len(self.test),
        }


def _read_json(path: Path, field: str) -> dict:
    if not path.is_file():
        raise LoadError(field, f"missing file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(field, f"invalid JSON ({exc})") from None


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    meta = _read_json(root / "meta.json", "meta.json")
    for key in ("num_nodes", "num_features", "num_classes"):
        if not isinstance(meta.get(key), int) or meta[key] < 0:
            raise LoadError(f"meta.{key}", "missing or not a non-negative integer")
    n, f, k = meta["num_nodes"], meta["num_features"], meta["num_classes"]
    if meta.get("feature_dtype", "f32") != "f32":
        raise LoadError("meta.feature_dtype", f"unsupported {meta['feature_dtype']!r}")

    feat_path = root / meta.get("feature_file", "features.bin")
    if not feat_path.is_file():
        raise LoadError("features", f"missing file {feat_path}")
    raw = np.fromfile(feat_path, dtype="<f4")
    if (f == 0 and raw.size) or (f and raw.size % f):
        raise LoadError("features", f"{raw.size} values is not a multiple of num_features={f}")
    rows = raw.size // f if f else n
    if rows != n:
        raise LoadError("features", f"header declares {n} nodes, file holds {rows} rows")
    features = raw.reshape(n, f).astype(np.float32)

    edge_path = root / "edges.csv"
    if not edge_path.is_file():
        raise LoadError("edges", f"missing file {edge_path}")
    text = edge_path.read_text().split()
    try:
        edges = np.array([tuple(map(int, line.split(","))) for line in text], dtype=np.int64).reshape(-1, 2)
    except ValueError:
        raise LoadError("edges", "lines must be 'src,dst' integer pairs") from None
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise LoadError("edges", "node index out of range")
    graph = SparseGraph.from_edges(n, edges)

    label_path = root / "labels.csv"
    if not label_path.is_file():
        raise LoadError("labels", f"missing file {label_path}")
    try:
        labels = np.array([int(x) for x in label_path.read_text().split()], dtype=np.int64)
    except ValueError:
        raise LoadError("labels", "non-integer class id") from None

    sp = _read_json(root / "splits.json", "splits.json")
    try:
        splits = SplitSpec(*(np.asarray(sp[s], dtype=np.int64) for s in ("train", "val", "test")))
    except KeyError as exc:
        raise LoadError(f"splits.{exc.args[0]}", "missing") from None

    ds = Dataset(graph, features, labels, splits, k, name=meta.get("name", root.name), meta=meta)
    ds.validate()
    log.info("loaded %s: %s", ds.name, ds.summary())
    return ds


def save_dataset(ds: Dataset, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": ds.name,
        "num_nodes": ds.num_nodes,
        "num_features": ds.num_features,
        "num_classes": ds.num_classes,
        "feature_file": "features.bin",
        "feature_dtype": "f32",
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    ds.features.astype("<f4").tofile(root / "features.bin")
    pairs = ds.graph.undirected_pairs()
    (root / "edges.csv").write_text("".join(f"{a},{b}\n" for a, b in pairs))
    (root / "labels.csv").write_text("".join(f"{int(y)}\n" for y in ds.labels))
    splits = {s: [int(i) for i in getattr(ds.splits, s)] for s in ("train", "val", "test")}
    (root / "splits.json").write_text(json.dumps(splits) + "\n")
    return root


def planetoid_split(labels: np.ndarray, num_classes: int, per_class: int = 20,
                    num_val: int = 500, num_test: int = 1000, rng=None) -> SplitSpec:
    """``per_class`` training nodes per class, then disjoint val/test sets."""
    rng = np.random.default_rng(rng)
    n = len(labels)
    train = []
    for c in range(num_classes):
        members = np.flatnonzero(labels == c)
        train.extend(rng.permutation(members)[:per_class].tolist())
    train = np.sort(np.array(train, dtype=np.int64))
    rest = rng.permutation(np.setdiff1d(np.arange(n), train))
    if len(rest) < num_val + num_test:
        raise ValueError("not enough nodes for the requested val/test sizes")
    return SplitSpec(train, np.sort(rest[:num_val]), np.sort(rest[num_val : num_val + num_test]))


def synthetic_citation_dataset(
    num_nodes: int = 600,
    num_classes: int = 4,
    num_features: int = 200,
    avg_degree: float = 4.0,
    homophily: float = 0.8,
    words_per_node: int = 12,
    topic_strength: float = 0.5,
    per_class: int = 20,
    num_val: int = 100,
    num_test: int = 200,
    seed: int = 0,
    name: str = "synthetic",
) -> Dataset:
    """Planted-partition graph with sparse class-biased bag-of-words features.

    Intended for tests and demos: each class prefers its own slice of the
    vocabulary with probability ``topic_strength``; edges connect same-class
    nodes with probability ``homophily``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=num_nodes)
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]

    n_edges = int(num_nodes * avg_degree / 2)
    src = rng.integers(0, num_nodes, size=n_edges)
    same = rng.random(n_edges) < homophily
    dst = rng.integers(0, num_nodes, size=n_edges)
    for t in np.flatnonzero(same):
        pool = by_class[labels[src[t]]]
        dst[t] = pool[rng.integers(len(pool))]
    graph = SparseGraph.from_edges(num_nodes, np.stack([src, dst], axis=1))

    block = num_features // num_classes
    features = np.zeros((num_nodes, num_features), dtype=np.float32)
    for i in range(num_nodes):
        own = rng.random(words_per_node) < topic_strength
        words = np.where(
            own,
            labels[i] * block + rng.integers(0, block, size=words_per_node),
            rng.integers(0, num_features, size=words_per_node),
        )
        features[i, words] = 1.0
    splits = planetoid_split(labels, num_classes, per_class, num_val, num_test, rng)
    ds = Dataset(graph, features, labels.astype(np.int64), splits, num_classes, name=name)
    ds.validate()
    return ds
