"""Edge costs from attention, per-center shortest paths, and top-k path sampling.

Path length ``c`` counts nodes including the center, so ``c == 2`` is a
direct neighbor. Stored sequences exclude the center. A target lands in the
bucket matching the node count of its (tie-broken) shortest path; targets
whose shortest path needs more than ``C - 1`` edges are dropped.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numba
import numpy as np

from .graph import SparseGraph

EPS = 1e-8


class NumericError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------


def edge_costs_from_attention(attention) -> np.ndarray:
    """Average per-edge attention over heads. ``attention`` is (edges, heads)."""
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim == 1:
        att = att[:, None]
    if att.shape[1] < 1:
        raise NumericError("need at least one attention head")
    if not np.all(np.isfinite(att)) or np.any(att <= 0):
        raise NumericError("attention must be finite and strictly positive")
    return att.mean(axis=1)


def transform_costs(mean_attention) -> np.ndarray:
    """Map attention in (0, 1] to positive additive costs ``max(-ln a, EPS)``."""
    a = np.asarray(mean_attention, dtype=np.float64)
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise NumericError("mean attention must be finite and > 0")
    if np.any(a > 1.0 + 1e-5):
        raise NumericError("mean attention must not exceed 1")
    return np.maximum(-np.log(np.minimum(a, 1.0)), EPS)


def uniform_costs(graph: SparseGraph) -> np.ndarray:
    return np.ones(graph.num_edges, dtype=np.float64)


def check_costs(graph: SparseGraph, costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.shape != (graph.num_edges,):
        raise ValueError(f"expected {graph.num_edges} edge costs, got {costs.shape}")
    if not np.all(np.isfinite(costs)) or np.any(costs < EPS):
        raise NumericError(f"edge costs must be finite and >= {EPS}")
    return costs


# ---------------------------------------------------------------------------
# Dijkstra
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _shortest_path_tree(indptr, indices, costs, center):
    n = indptr.size - 1
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=np.int64)
    hops = np.full(n, -1, dtype=np.int64)
    done = np.zeros(n, dtype=np.bool_)
    dist[center] = 0.0
    heap = [(0.0, center)]
    while heap:
        d, u = heapq.heappop(heap)
        if done[u] or d > dist[u]:
            continue
        done[u] = True
        hops[u] = 0 if u == center else hops[pred[u]] + 1
        for e in range(indptr[u], indptr[u + 1]):
            v = indices[e]
            if done[v]:
                continue
            nd = d + costs[e]
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
            elif nd == dist[v] and u < pred[v]:
                pred[v] = u
    return dist, pred, hops


@numba.njit(cache=True)
def _bounded_paths(indptr, indices, costs, center, max_edges):
    dist, pred, hops = _shortest_path_tree(indptr, indices, costs, center)
    keep = np.flatnonzero((hops >= 1) & (hops <= max_edges))
    m = keep.size
    seq = np.full((m, max_edges), -1, dtype=np.int64)
    for t in range(m):
        v = keep[t]
        h = hops[v]
        w = v
        for s in range(h - 1, -1, -1):
            seq[t, s] = w
            w = pred[w]
    return keep, dist[keep], hops[keep], seq


@dataclass(frozen=True)
class Path:
    center: int
    target: int
    sequence: tuple[int, ...]
    cost: float

    @property
    def length(self) -> int:
        return len(self.sequence) + 1

    def to_dict(self) -> dict:
        return {"target": self.target, "sequence": list(self.sequence),
                "length": self.length, "cost": self.cost}


def dijkstra_paths(graph: SparseGraph, costs, center: int, max_len: int) -> list[Path]:
    """Shortest paths from ``center`` whose node count (incl. center) is <= ``max_len``.

    Predecessor ties go to the smallest node id. Returned in target order.
    """
    if max_len < 2:
        raise ValueError("max path length must be >= 2")
    costs = check_costs(graph, costs)
    targets, dists, hops, seq = _bounded_paths(graph.indptr, graph.indices, costs, int(center), max_len - 1)
    return [
        Path(int(center), int(t), tuple(int(x) for x in seq[k, : hops[k]]), float(dists[k]))
        for k, t in enumerate(targets)
    ]


def sample_size(deg: int, r: float) -> int:
    """Number of paths kept per (center, length): ``max(1, round_half_up(deg * r))``."""
    return max(1, int(np.floor(deg * r + 0.5)))


def sample_paths(paths: list[Path], r: float, deg: int) -> list[Path]:
    """Keep the ``k`` cheapest paths; cost ties go to the smaller target id."""
    if r <= 0:
        raise ValueError(f"sample ratio must be positive, got {r}")
    k = sample_size(deg, r)
    return sorted(paths, key=lambda p: (p.cost, p.target))[:k]


# ---------------------------------------------------------------------------
# Path sets
# ---------------------------------------------------------------------------


@dataclass
class PathBucket:
    """All sampled paths of one length ``c``, ordered by (center, cost, target)."""

    length: int
    centers: np.ndarray
    targets: np.ndarray
    costs: np.ndarray
    sequences: np.ndarray  # (P, c - 1)

    def __len__(self) -> int:
        return int(self.centers.size)

    def permuted(self, perm) -> "PathBucket":
        perm = np.asarray(perm)
        return PathBucket(self.length, self.centers[perm], self.targets[perm],
                          self.costs[perm], self.sequences[perm])


@dataclass
class PathSet:
    num_nodes: int
    max_len: int
    ratio: float
    buckets: dict[int, PathBucket]
    degrees: np.ndarray = field(repr=False)

    def bucket(self, c: int) -> PathBucket:
        return self.buckets[c]

    def lengths(self) -> list[int]:
        return sorted(self.buckets)

    def paths_for(self, center: int) -> list[Path]:
        out = [Path(center, center, (), 0.0)]
        for c in self.lengths():
            b = self.buckets[c]
            lo, hi = np.searchsorted(b.centers, [center, center + 1])
            for k in range(lo, hi):
                out.append(Path(center, int(b.targets[k]), tuple(int(x) for x in b.sequences[k]),
                                float(b.costs[k])))
        return out

    def truncate(self, max_len: int) -> "PathSet":
        """The path set ``build_pathset`` would give for a smaller maximum length."""
        if not 2 <= max_len <= self.max_len:
            raise ValueError(f"cannot truncate length {self.max_len} path set to {max_len}")
        kept = {c: b for c, b in self.buckets.items() if c <= max_len}
        return PathSet(self.num_nodes, max_len, self.ratio, kept, self.degrees)

    def total_paths(self) -> int:
        return sum(len(b) for b in self.buckets.values()) + self.num_nodes

    def to_json(self, centers=None) -> dict:
        centers = range(self.num_nodes) if centers is None else centers
        return {str(int(i)): [p.to_dict() for p in self.paths_for(int(i))] for i in centers}

    def dump(self, path, centers=None) -> None:
        FsPath(path).write_text(json.dumps(self.to_json(centers), indent=1) + "\n")


def build_pathset(graph: SparseGraph, costs, max_len: int, ratio: float) -> PathSet:
    """Shortest paths from every center, bucketed by length and top-k sampled."""
    if max_len < 2:
        raise ValueError("max path length must be >= 2")
    if ratio <= 0:
        raise ValueError(f"sample ratio must be positive, got {ratio}")
    costs = check_costs(graph, costs)
    n = graph.num_nodes
    max_edges = max_len - 1
    cols = {"center": [], "target": [], "cost": [], "hops": [], "seq": []}
    for i in range(n):
        t, d, h, s = _bounded_paths(graph.indptr, graph.indices, costs, i, max_edges)
        cols["center"].append(np.full(t.size, i, dtype=np.int64))
        cols["target"].append(t)
        cols["cost"].append(d)
        cols["hops"].append(h)
        cols["seq"].append(s)
    center = np.concatenate(cols["center"]) if n else np.zeros(0, np.int64)
    target = np.concatenate(cols["target"]) if n else np.zeros(0, np.int64)
    cost = np.concatenate(cols["cost"]) if n else np.zeros(0)
    hops = np.concatenate(cols["hops"]) if n else np.zeros(0, np.int64)
    seq = np.concatenate(cols["seq"]) if n else np.zeros((0, max_edges), np.int64)

    degrees = graph.degrees
    k = np.maximum(1, np.floor(degrees * ratio + 0.5).astype(np.int64))
    order = np.lexsort((target, cost, hops, center))
    center, target, cost, hops, seq = center[order], target[order], cost[order], hops[order], seq[order]
    # rank of each path inside its (center, hops) run
    new_run = np.r_[True, (center[1:] != center[:-1]) | (hops[1:] != hops[:-1])]
    run_start = np.maximum.accumulate(np.where(new_run, np.arange(center.size), 0))
    rank = np.arange(center.size) - run_start
    keep = rank < k[center]

    buckets = {}
    for c in range(2, max_len + 1):
        sel = keep & (hops == c - 1)
        buckets[c] = PathBucket(c, center[sel], target[sel], cost[sel], seq[sel, : c - 1].copy())
    return PathSet(n, max_len, ratio, buckets, degrees)
