"""Model assembly, masked cross-entropy training with early stopping, and the
iterative path-regeneration loop."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Dataset
from .layers import DropoutState, LayerPaths, SpaganLayerParams, node_attention, spagan_layer_forward
from .optim import Adam
from .paths import PathSet, build_pathset, edge_costs_from_attention, transform_costs, uniform_costs

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


# learning rate / L2 per dataset; Pubmed also uses 8 output heads
DATASET_DEFAULTS = {
    "cora": {"lr": 0.005, "l2": 5e-4},
    "citeseer": {"lr": 0.0085, "l2": 2e-3},
    "pubmed": {"lr": 0.01, "l2": 1e-3, "heads2": 8},
}


@dataclass
class ModelConfig:
    hidden: int = 8
    heads1: int = 8
    heads2: int = 1
    max_len1: int = 3
    max_len2: int = 2
    keep_prob: float = 0.4
    fix_beta: bool = False
    dtype: str = "float32"

    def validate(self) -> None:
        if min(self.hidden, self.heads1, self.heads2) < 1:
            raise ConfigError("hidden width and head counts must be >= 1")
        if min(self.max_len1, self.max_len2) < 2:
            raise ConfigError("max path length must be >= 2")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError("dropout keep probability must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def max_lens(self) -> tuple[int, int]:
        return (self.max_len1, self.max_len2)


@dataclass
class TrainConfig:
    lr: float = 0.005
    l2: float = 5e-4
    max_epochs: int = 1000
    patience: int = 100
    ratio: float = 1.0
    iterations: int = 2
    runs: int = 10
    seed: int = 0
    normalize_features: bool = True

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.l2 < 0:
            raise ConfigError("l2 weight must be >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max epochs must be >= 1")
        if not self.ratio > 0:
            raise ConfigError("sample ratio must be > 0")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")


def configs_for(name: str, **overrides) -> tuple[ModelConfig, TrainConfig]:
    """Global defaults, then per-dataset defaults, then explicit overrides."""
    merged = dict(DATASET_DEFAULTS.get(name.lower(), {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    mfields = ModelConfig.__dataclass_fields__
    tfields = TrainConfig.__dataclass_fields__
    unknown = set(merged) - set(mfields) - set(tfields)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    mcfg = ModelConfig(**{k: v for k, v in merged.items() if k in mfields})
    tcfg = TrainConfig(**{k: v for k, v in merged.items() if k in tfields})
    mcfg.validate()
    tcfg.validate()
    return mcfg, tcfg


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    layers: list[SpaganLayerParams]
    config: ModelConfig
    # edge costs behind the path set the parameters were last trained on
    costs: np.ndarray | None = None

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer.tensors()]

    def snapshot(self) -> list[np.ndarray]:
        return [t.value.copy() for t in self.parameters()]

    def restore(self, snap: list[np.ndarray]) -> None:
        for t, v in zip(self.parameters(), snap):
            t.value[...] = v


def save_model(model: Model, path) -> None:
    arrays = {f"param_{k}": t.value for k, t in enumerate(model.parameters())}
    if model.costs is not None:
        arrays["costs"] = model.costs
    arrays["config"] = np.array(json.dumps(asdict(model.config)))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path, dataset: Dataset) -> Model:
    with np.load(path) as z:
        config = ModelConfig(**json.loads(str(z["config"])))
        model = build_model(dataset, config, 0)
        params = model.parameters()
        stored = sorted((k for k in z.files if k.startswith("param_")), key=lambda k: int(k[6:]))
        if len(stored) != len(params):
            raise ConfigError(f"saved model has {len(stored)} parameter arrays, expected {len(params)}")
        for t, key in zip(params, stored):
            if z[key].shape != t.shape:
                raise ConfigError(f"{key}: shape {z[key].shape} does not fit {t.shape}")
            t.value[...] = z[key]
        model.costs = z["costs"].copy() if "costs" in z.files else None
    return model


def build_model(dataset: Dataset, config: ModelConfig, rng) -> Model:
    config.validate()
    rng = np.random.default_rng(rng)
    dtype = np.dtype(config.dtype)
    first = SpaganLayerParams.init(rng, dataset.num_features, config.hidden, config.heads1,
                                   config.max_len1, merge="concat", activation="elu",
                                   fix_beta=config.fix_beta, dtype=dtype)
    second = SpaganLayerParams.init(rng, first.out_width, dataset.num_classes, config.heads2,
                                    config.max_len2, merge="mean", activation="identity",
                                    fix_beta=config.fix_beta, dtype=dtype)
    return Model([first, second], config)


def prepare_features(dataset: Dataset, normalize: bool, dtype, sparse: bool | None = None) -> Tensor:
    """Optionally row-normalized features; stored sparse when mostly zero."""
    x = dataset.features.astype(np.float64)
    if normalize:
        sums = x.sum(axis=1, keepdims=True)
        x = np.divide(x, sums, out=np.zeros_like(x), where=sums != 0)
    x = x.astype(dtype)
    if sparse is None:
        sparse = x.size > 0 and np.count_nonzero(x) < 0.1 * x.size
    return Tensor(sp.csr_matrix(x) if sparse else x)


def build_layer_paths(dataset: Dataset, config: ModelConfig, costs, ratio: float,
                      cache: dict | None = None) -> list[LayerPaths]:
    """One LayerPaths per layer; shorter maximum lengths reuse the longest build."""
    longest = max(config.max_lens)
    key = (longest, ratio)
    if cache is not None and key in cache:
        full = cache[key]
    else:
        full = build_pathset(dataset.graph, costs, longest, ratio)
        if cache is not None:
            cache[key] = full
    return [LayerPaths.build(full if c == longest else full.truncate(c)) for c in config.max_lens]


def forward(model: Model, features: Tensor, layer_paths: list[LayerPaths], drop: DropoutState):
    """Returns (logits, per-layer inputs)."""
    h = features
    inputs = []
    for params, paths in zip(model.layers, layer_paths):
        inputs.append(h)
        h, _, _ = spagan_layer_forward(h, paths, params, drop)
    return h, inputs


def cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    if len(mask) == 0:
        raise ad.UsageError("empty mask")
    logp = ad.log_softmax_rows(ad.gather_rows(logits, mask))
    picked = ad.pick(logp, np.arange(len(mask)), labels[mask])
    return ad.scale(ad.sum_all(picked), -1.0 / len(mask))


def l2_penalty(params: list[Tensor], weight: float) -> Tensor:
    total = None
    for p in params:
        sq = ad.sum_all(ad.mul(p, p))
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, weight)


def forward_loss(model: Model, dataset: Dataset, features: Tensor, layer_paths: list[LayerPaths],
                 mask, l2: float = 0.0, drop: DropoutState | None = None):
    """Masked mean cross-entropy (+ l2 * sum of squared parameters).

    Returns (loss, predictions for all nodes, final-layer node attention).
    """
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ad.UsageError("empty mask")
    drop = drop or DropoutState()
    logits, inputs = forward(model, features, layer_paths, drop)
    loss = cross_entropy(logits, dataset.labels, mask)
    if l2 > 0:
        loss = ad.add(loss, l2_penalty(model.parameters(), l2))
    preds = logits.value.argmax(axis=1)
    _, attention = node_attention(inputs[-1], dataset.graph, model.layers[-1])
    return loss, preds, attention


def evaluate(model: Model, dataset: Dataset, features: Tensor, layer_paths: list[LayerPaths], mask):
    """(accuracy, cross-entropy) on ``mask`` with dropout disabled."""
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ad.UsageError("empty mask")
    with ad.no_grad():
        logits, _ = forward(model, features, layer_paths, DropoutState())
        loss = cross_entropy(logits, dataset.labels, mask).item()
    acc = float(np.mean(logits.value[mask].argmax(axis=1) == dataset.labels[mask]))
    return acc, loss


@dataclass
class PhaseResult:
    best_epoch: int
    best_val_loss: float
    epochs: int
    val_curve: list[float] = field(default_factory=list)
    train_curve: list[float] = field(default_factory=list)


def train_phase(model: Model, dataset: Dataset, features: Tensor, layer_paths: list[LayerPaths],
                config: TrainConfig, rng: np.random.Generator) -> PhaseResult:
    """Adam on the training loss; keep the parameters with the lowest validation loss."""
    params = model.parameters()
    opt = Adam(params, config.lr)
    drop = DropoutState(True, model.config.keep_prob, rng)
    best = (np.inf, -1, model.snapshot())
    val_curve, train_curve = [], []
    wait = 0
    tape = ad.Tape()
    with ad.use_tape(tape):
        for epoch in range(config.max_epochs):
            opt.zero_grad()
            logits, _ = forward(model, features, layer_paths, drop)
            loss = cross_entropy(logits, dataset.labels, dataset.train)
            if config.l2 > 0:
                loss = ad.add(loss, l2_penalty(params, config.l2))
            train_loss = loss.item()
            if not np.isfinite(train_loss):
                raise TrainingError(epoch, "training loss is not finite")
            ad.backward(loss, tape)
            opt.step()

            _, val_loss = evaluate(model, dataset, features, layer_paths, dataset.val)
            if not np.isfinite(val_loss):
                raise TrainingError(epoch, "validation loss is not finite")
            train_curve.append(train_loss)
            val_curve.append(val_loss)
            if val_loss < best[0]:
                best = (val_loss, epoch, model.snapshot())
                wait = 0
            else:
                wait += 1
                if wait >= config.patience:
                    break
    model.restore(best[2])
    return PhaseResult(best[1], best[0], len(val_curve), val_curve, train_curve)


def regenerate_costs(model: Model, dataset: Dataset, features: Tensor,
                     layer_paths: list[LayerPaths]) -> np.ndarray:
    """Edge costs from the final layer's head-averaged node attention."""
    with ad.no_grad():
        _, inputs = forward(model, features, layer_paths, DropoutState())
    pairs, attention = node_attention(inputs[-1], dataset.graph, model.layers[-1])
    not_self = pairs[:, 0] != pairs[:, 1]
    # with self-pairs removed, pairs are in CSR edge order
    return transform_costs(edge_costs_from_attention(attention[not_self]))


@dataclass
class RunResult:
    seed: int
    test_acc: float
    val_acc: float
    val_loss: float
    best_epoch: int
    phases: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def iterative_train(dataset: Dataset, mcfg: ModelConfig, tcfg: TrainConfig, seed: int | None = None,
                    uniform_cache: dict | None = None):
    """Train on uniform-cost paths, then rebuild paths from learned attention and retrain.

    Each later phase warm-starts from the previous best parameters with a
    fresh optimizer. Returns (model, RunResult, final layer paths).
    """
    mcfg.validate()
    tcfg.validate()
    seed = tcfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    model = build_model(dataset, mcfg, rng)
    features = prepare_features(dataset, tcfg.normalize_features, np.dtype(mcfg.dtype))
    model.costs = uniform_costs(dataset.graph)
    layer_paths = build_layer_paths(dataset, mcfg, model.costs, tcfg.ratio, uniform_cache)
    phases = []
    for it in range(tcfg.iterations):
        if it > 0:
            model.costs = regenerate_costs(model, dataset, features, layer_paths)
            layer_paths = build_layer_paths(dataset, mcfg, model.costs, tcfg.ratio)
        res = train_phase(model, dataset, features, layer_paths, tcfg, rng)
        val_acc, _ = evaluate(model, dataset, features, layer_paths, dataset.val)
        phases.append({"iteration": it + 1, "epochs": res.epochs, "best_epoch": res.best_epoch,
                       "val_loss": res.best_val_loss, "val_acc": val_acc})
        log.info("seed %d iteration %d: %d epochs, best val loss %.4f at %d",
                 seed, it + 1, res.epochs, res.best_val_loss, res.best_epoch)
    test_acc, _ = evaluate(model, dataset, features, layer_paths, dataset.test)
    val_acc, val_loss = evaluate(model, dataset, features, layer_paths, dataset.val)
    result = RunResult(seed, test_acc, val_acc, val_loss, phases[-1]["best_epoch"], phases,
                       time.perf_counter() - t0)
    return model, result, layer_paths


@dataclass
class MetricsReport:
    runs: list[RunResult]
    config: dict
    last_model: Model | None = field(default=None, repr=False)

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.test_acc for r in self.runs])

    @property
    def mean_acc(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std_acc(self) -> float:
        return float(self.accuracies.std())

    def to_json(self) -> dict:
        return {
            "runs": [
                {"seed": r.seed, "test_acc": r.test_acc, "val_acc": r.val_acc, "val_loss": r.val_loss,
                 "best_epoch": r.best_epoch, "iterations": r.phases, "seconds": round(r.seconds, 3)}
                for r in self.runs
            ],
            "mean_acc": self.mean_acc,
            "std_acc": self.std_acc,
            "config": self.config,
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def run_seeds(base_seed: int, runs: int) -> list[int]:
    return [base_seed + k for k in range(runs)]


def multi_run(dataset: Dataset, mcfg: ModelConfig, tcfg: TrainConfig, runs: int | None = None,
              seeds: list[int] | None = None) -> MetricsReport:
    runs = tcfg.runs if runs is None else runs
    if runs < 1:
        raise ConfigError("runs must be >= 1")
    seeds = seeds if seeds is not None else run_seeds(tcfg.seed, runs)
    cache: dict = {}
    results = []
    model = None
    for s in seeds:
        model, res, _ = iterative_train(dataset, mcfg, tcfg, seed=s, uniform_cache=cache)
        log.info("seed %d: test acc %.4f (%.1fs)", s, res.test_acc, res.seconds)
        results.append(res)
    cfg = {"dataset": dataset.name, "model": asdict(mcfg), "train": asdict(copy.copy(tcfg))}
    cfg["train"]["runs"] = len(seeds)
    return MetricsReport(results, cfg, model)
