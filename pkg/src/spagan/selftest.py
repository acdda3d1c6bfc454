"""Fast property suites: gradient check, attention normalization, shortest-path
oracle and GAT degeneration. Used by ``spagan selftest``."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Dataset, SparseGraph, SplitSpec
from .layers import (EVAL, GatLayerParams, LayerPaths, SpaganLayerParams, first_level_aggregate,
                     gat_layer_forward, node_attention, project, spagan_layer_forward)
from .paths import build_pathset, dijkstra_paths, uniform_costs
from .training import ModelConfig, build_model, build_layer_paths, forward_loss


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<14} {self.detail} ({self.seconds:.1f}s)"


def random_graph(rng: np.random.Generator, n: int, p: float = 0.35) -> SparseGraph:
    upper = np.argwhere(np.triu(rng.random((n, n)) < p, k=1))
    return SparseGraph.from_edges(n, upper)


def random_dataset(rng: np.random.Generator, n: int, num_features: int = 5, num_classes: int = 3) -> Dataset:
    graph = random_graph(rng, n)
    features = rng.normal(size=(n, num_features))
    labels = rng.integers(0, num_classes, size=n)
    nodes = rng.permutation(n)
    third = max(1, n // 3)
    splits = SplitSpec(np.sort(nodes[:third]), np.sort(nodes[third : 2 * third]), np.sort(nodes[2 * third :]))
    return Dataset(graph, features, labels, splits, num_classes, name="random")


def brute_force_costs(graph: SparseGraph, costs: np.ndarray, center: int, max_len: int) -> dict[int, float]:
    """Cheapest simple path to every node, kept when that path has at most ``max_len`` nodes."""
    best: dict[int, tuple[float, int]] = {}

    def walk(u: int, cost: float, visited: list[int]) -> None:
        for e in range(graph.indptr[u], graph.indptr[u + 1]):
            v = int(graph.indices[e])
            if v in visited:
                continue
            c = cost + costs[e]
            if v not in best or c < best[v][0]:
                best[v] = (c, len(visited))
            visited.append(v)
            walk(v, c, visited)
            visited.pop()

    walk(center, 0.0, [center])
    return {v: c for v, (c, hops) in best.items() if hops + 1 <= max_len}


def _gradient_instance(rng: np.random.Generator, eps: float = 1e-6) -> float:
    n = int(rng.integers(4, 9))
    ds = random_dataset(rng, n)
    cfg = ModelConfig(hidden=3, heads1=2, heads2=2, max_len1=3, max_len2=2, keep_prob=1.0,
                      dtype="float64")
    model = build_model(ds, cfg, rng)
    costs = rng.uniform(0.2, 2.0, size=ds.graph.num_edges)
    paths = build_layer_paths(ds, cfg, costs, 1.0)
    x = Tensor(ds.features)
    mask = np.arange(n)

    def loss_value() -> float:
        with ad.no_grad():
            return forward_loss(model, ds, x, paths, mask, l2=1e-3, drop=EVAL)[0].item()

    tape = ad.Tape()
    with ad.use_tape(tape):
        loss, _, _ = forward_loss(model, ds, x, paths, mask, l2=1e-3, drop=EVAL)
        ad.backward(loss, tape)
    worst = 0.0
    for p in model.parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(analytic)
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = loss_value()
            flat[k] = old - eps
            down = loss_value()
            flat[k] = old
            numeric.flat[k] = (up - down) / (2 * eps)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def gradient_suite(instances: int = 20, seed: int = 0, tol: float = 1e-4) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = max(_gradient_instance(rng) for _ in range(instances))
    return worst < tol, f"{instances} instances, worst relative error {worst:.2e}"


def normalization_suite(instances: int = 20, seed: int = 1, tol: float = 1e-6) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(3, 13))
        ds = random_dataset(rng, n)
        params = SpaganLayerParams.init(rng, ds.num_features, 4, 2, 3)
        pathset = build_pathset(ds.graph, rng.uniform(0.1, 3.0, ds.graph.num_edges), 3, float(rng.uniform(0.3, 1.5)))
        paths = LayerPaths.build(pathset)
        x = Tensor(ds.features)
        with ad.no_grad():
            for k, h in enumerate(project(x, params.weights)):
                for idx in paths.buckets:
                    _, alpha = first_level_aggregate(h, idx, params.attn_alpha[(k, idx.length)])
                    worst = max(worst, float(np.abs(idx.groups.sum(alpha.value) - 1).max()))
            _, _, betas = spagan_layer_forward(x, paths, params)
        centers = np.concatenate([idx.present for idx in paths.buckets])
        for beta in betas:
            if beta is not None:
                worst = max(worst, float(np.abs(np.bincount(centers, beta, minlength=n) - 1).max()))
        pairs, att = node_attention(x, ds.graph, params)
        for col in att.T:
            worst = max(worst, float(np.abs(np.bincount(pairs[:, 0], col, minlength=n) - 1).max()))
    return worst < tol, f"{instances} instances, worst |sum - 1| {worst:.2e}"


def dijkstra_suite(instances: int = 50, seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for _ in range(instances):
        n = int(rng.integers(2, 13))
        graph = random_graph(rng, n, p=float(rng.uniform(0.1, 0.4)))
        # learned costs are direction dependent; alternate with symmetric ones
        costs = rng.uniform(0.1, 5.0, size=graph.num_edges)
        if rng.random() < 0.5:
            for a, b in graph.undirected_pairs():
                costs[graph.edge_position(b, a)] = costs[graph.edge_position(a, b)]
        max_len = int(rng.integers(2, 6))
        for center in range(n):
            got = {p.target: p.cost for p in dijkstra_paths(graph, costs, center, max_len)}
            if got != brute_force_costs(graph, costs, center, max_len):
                mismatches += 1
    return mismatches == 0, f"{instances} graphs, {mismatches} mismatching centers"


def degeneration_suite(instances: int = 20, seed: int = 3, tol: float = 1e-6) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 15))
        ds = random_dataset(rng, n)
        gat = GatLayerParams.init(rng, ds.num_features, 4, int(rng.integers(1, 4)))
        spagan = SpaganLayerParams.from_gat(gat, rng)
        # costs in [1, 2) keep every direct edge a shortest path, like uniform costs
        costs = rng.uniform(1.0, 2.0, ds.graph.num_edges) if rng.random() < 0.5 else None
        pathset = build_pathset(ds.graph, uniform_costs(ds.graph) if costs is None else costs, 2, 1.0)
        x = Tensor(ds.features)
        with ad.no_grad():
            want, _, _ = gat_layer_forward(x, ds.graph, gat)
            got, _, _ = spagan_layer_forward(x, pathset, spagan)
        worst = max(worst, float(np.abs(want.value - got.value).max()))
    return worst < tol, f"{instances} instances, max |diff| {worst:.2e}"


SUITES = {
    "gradient": gradient_suite,
    "normalization": normalization_suite,
    "dijkstra": dijkstra_suite,
    "degeneration": degeneration_suite,
}


def run_suites(names=None) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        try:
            ok, detail = SUITES[name]()
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"error: {exc!r}"
        results.append(SuiteResult(name, ok, detail, time.perf_counter() - t0))
    return results
