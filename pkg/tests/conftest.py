import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from spagan.graph import Dataset, SparseGraph, SplitSpec  # noqa: E402


def random_graph(rng, n, p=0.35):
    upper = np.argwhere(np.triu(rng.random((n, n)) < p, k=1))
    return SparseGraph.from_edges(n, upper)


def random_dataset(rng, n, num_features=5, num_classes=3, p=0.35):
    graph = random_graph(rng, n, p)
    features = rng.normal(size=(n, num_features))
    labels = rng.integers(0, num_classes, size=n)
    nodes = rng.permutation(n)
    third = max(1, n // 3)
    splits = SplitSpec(np.sort(nodes[:third]), np.sort(nodes[third : 2 * third]), np.sort(nodes[2 * third :]))
    return Dataset(graph, features, labels, splits, num_classes, name="random")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """Store one PASS/FAIL line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(CRITERIA, {})

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
        lines[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
