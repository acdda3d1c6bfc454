"""Shortest-path graph attention for semi-supervised node classification."""

from .graph import Dataset, SparseGraph, load_dataset, save_dataset
from .paths import PathSet, build_pathset, dijkstra_paths
from .training import ModelConfig, TrainConfig, iterative_train, multi_run

__all__ = [
    "Dataset",
    "SparseGraph",
    "load_dataset",
    "save_dataset",
    "PathSet",
    "build_pathset",
    "dijkstra_paths",
    "ModelConfig",
    "TrainConfig",
    "iterative_train",
    "multi_run",
]
__version__ = "0.1.0"
