import json
import math

import numpy as np
import pytest

from spagan import autodiff as ad
from spagan import training
from spagan.autodiff import Tensor
from spagan.graph import Dataset, SparseGraph, SplitSpec, synthetic_citation_dataset
from spagan.layers import EVAL
from spagan.paths import build_pathset, uniform_costs
from spagan.training import (ConfigError, ModelConfig, TrainConfig, TrainingError, build_layer_paths, build_model,
                             configs_for, cross_entropy, evaluate, forward_loss, iterative_train, l2_penalty,
                             load_model, multi_run, prepare_features, save_model, train_phase)

from conftest import random_dataset
from oracles import central_difference, relative_error

SMALL = dict(hidden=4, heads1=2, heads2=1)


@pytest.fixture(scope="module")
def toy():
    ds = synthetic_citation_dataset(num_nodes=150, num_classes=3, num_features=40, avg_degree=4.0,
                                    num_val=30, num_test=60, seed=5)
    ds.name = "toy"
    return ds


def small_configs(**kw):
    merged = dict(SMALL, max_epochs=40, patience=100, iterations=1)
    merged.update(kw)
    return configs_for("toy", **merged)


def setup(ds, mcfg, tcfg, seed=0):
    model = build_model(ds, mcfg, seed)
    x = prepare_features(ds, tcfg.normalize_features, np.dtype(mcfg.dtype))
    paths = build_layer_paths(ds, mcfg, uniform_costs(ds.graph), tcfg.ratio)
    return model, x, paths


# ---------------------------------------------------------------------------
# configuration and model assembly
# ---------------------------------------------------------------------------


def test_dataset_defaults_and_precedence():
    m, t = configs_for("cora")
    assert (t.lr, t.l2, m.heads2) == (0.005, 5e-4, 1)
    m, t = configs_for("Citeseer")
    assert (t.lr, t.l2) == (0.0085, 2e-3)
    m, t = configs_for("pubmed", lr=0.02)
    assert (t.lr, t.l2, m.heads2) == (0.02, 1e-3, 8)
    m, t = configs_for("unknown-set")
    assert (t.lr, t.l2, m.max_lens, t.iterations, t.ratio) == (0.005, 5e-4, (3, 2), 2, 1.0)
    assert (m.hidden, m.heads1, m.keep_prob, t.patience, t.max_epochs, t.runs) == (8, 8, 0.4, 100, 1000, 10)


@pytest.mark.parametrize("override", [dict(hidden=0), dict(lr=0.0), dict(l2=-1.0), dict(iterations=0),
                                      dict(patience=0), dict(ratio=0.0), dict(keep_prob=0.0),
                                      dict(max_len1=1), dict(runs=0), dict(bogus=1)])
def test_invalid_configs(override):
    with pytest.raises(ConfigError):
        configs_for("cora", **override)


def test_build_model_cora_shapes():
    ds = Dataset(SparseGraph.from_edges(3, []), np.zeros((3, 1433)), np.zeros(3, dtype=int),
                 SplitSpec(np.array([0]), np.array([1]), np.array([2])), 7)
    mcfg, _ = configs_for("cora")
    model = build_model(ds, mcfg, 0)
    first, second = model.layers
    assert [w.shape for w in first.weights] == [(1433, 8)] * 8
    assert (first.merge, first.activation, first.out_width) == ("concat", "elu", 64)
    assert [w.shape for w in second.weights] == [(64, 7)]
    assert (second.merge, second.activation, second.out_width) == ("mean", "identity", 7)
    assert (first.max_len, second.max_len) == (3, 2)


def test_build_model_deterministic(toy):
    mcfg, _ = small_configs()
    a, b = build_model(toy, mcfg, 7), build_model(toy, mcfg, 7)
    assert all(np.array_equal(x.value, y.value) for x, y in zip(a.parameters(), b.parameters()))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_cross_entropy_perfect_and_uniform():
    labels = np.array([0, 3, 6, 2])
    perfect = np.full((4, 7), -50.0)
    perfect[np.arange(4), labels] = 50.0
    assert cross_entropy(Tensor(perfect), labels, np.arange(4)).item() < 1e-6
    uniform = cross_entropy(Tensor(np.zeros((4, 7))), labels, np.arange(4)).item()
    assert uniform == pytest.approx(math.log(7), abs=1e-12)
    assert uniform == pytest.approx(1.9459, abs=1e-4)


def test_empty_mask_is_usage_error(toy):
    mcfg, tcfg = small_configs()
    model, x, paths = setup(toy, mcfg, tcfg)
    with pytest.raises(ad.UsageError):
        forward_loss(model, toy, x, paths, [])
    with pytest.raises(ad.UsageError):
        evaluate(model, toy, x, paths, np.array([], dtype=int))


def test_l2_term_recomputed(toy):
    mcfg, tcfg = small_configs(dtype="float64")
    model, x, paths = setup(toy, mcfg, tcfg)
    lam = 3e-3
    with ad.no_grad():
        plain = forward_loss(model, toy, x, paths, toy.train, 0.0, EVAL)[0].item()
        reg = forward_loss(model, toy, x, paths, toy.train, lam, EVAL)[0].item()
        direct = l2_penalty(model.parameters(), lam).item()
    by_hand = lam * sum(float(np.sum(p.value.astype(np.float64) ** 2)) for p in model.parameters())
    assert reg - plain == pytest.approx(by_hand, abs=1e-6)
    assert direct == pytest.approx(by_hand, abs=1e-12)


def test_forward_loss_outputs(toy):
    mcfg, tcfg = small_configs()
    model, x, paths = setup(toy, mcfg, tcfg)
    loss, preds, att = forward_loss(model, toy, x, paths, toy.train, 0.0, EVAL)
    assert preds.shape == (toy.num_nodes,)
    assert att.shape == (toy.graph.num_edges + toy.num_nodes, mcfg.heads2)


@pytest.mark.parametrize("seed", range(3))
def test_full_model_gradient_six_nodes(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 6, p=0.5)
    mcfg = ModelConfig(hidden=3, heads1=2, heads2=2, max_len1=3, max_len2=2, keep_prob=1.0,
                      dtype="float64")
    model = build_model(ds, mcfg, rng)
    paths = build_layer_paths(ds, mcfg, rng.uniform(0.2, 2.0, ds.graph.num_edges), 1.0)
    x = Tensor(ds.features)
    mask = np.arange(6)
    tape = ad.Tape()
    with ad.use_tape(tape):
        loss, _, _ = forward_loss(model, ds, x, paths, mask, 1e-2, EVAL)
        ad.backward(loss, tape)

    def value():
        with ad.no_grad():
            return forward_loss(model, ds, x, paths, mask, 1e-2, EVAL)[0].item()

    for p in model.parameters():
        assert relative_error(p.grad, central_difference(value, p.value)) < 1e-4


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_patience_stops_one_epoch_after_best(toy, monkeypatch):
    mcfg, tcfg = small_configs(patience=1, max_epochs=50)
    model, x, paths = setup(toy, mcfg, tcfg)
    losses = iter(np.arange(1.0, 100.0))
    monkeypatch.setattr(training, "evaluate", lambda *a, **k: (0.0, next(losses)))
    res = train_phase(model, toy, x, paths, tcfg, np.random.default_rng(0))
    assert (res.best_epoch, res.epochs, res.best_val_loss) == (0, 2, 1.0)


def test_nan_loss_raises_with_epoch(toy):
    mcfg, tcfg = small_configs()
    model, x, paths = setup(toy, mcfg, tcfg)
    bad = Tensor(np.full((toy.num_nodes, toy.num_features), np.nan))
    with pytest.raises(TrainingError) as info:
        train_phase(model, toy, bad, paths, tcfg, np.random.default_rng(0))
    assert info.value.epoch == 0


def test_toy_separable_graph_fits():
    # two 4-cliques, one per class, with class-indicating features
    edges = [(a, b) for block in (range(4), range(4, 8)) for a in block for b in block if a < b]
    labels = np.array([0] * 4 + [1] * 4)
    rng = np.random.default_rng(0)
    features = np.eye(2)[labels] + 0.1 * rng.random((8, 2))
    everyone = np.arange(8)
    ds = Dataset(SparseGraph.from_edges(8, edges), features, labels,
                 SplitSpec(everyone, everyone, np.array([], dtype=int)), 2, name="toy8")
    mcfg, tcfg = configs_for("toy8", hidden=4, heads1=2, max_epochs=200, patience=200, lr=0.01, l2=0.0)
    model, x, paths = setup(ds, mcfg, tcfg)
    res = train_phase(model, ds, x, paths, tcfg, rng)
    assert min(res.train_curve) < 0.05


def test_training_deterministic(toy):
    mcfg, tcfg = small_configs(max_epochs=15)
    curves = []
    for _ in range(2):
        model, x, paths = setup(toy, mcfg, tcfg, seed=3)
        curves.append(train_phase(model, toy, x, paths, tcfg, np.random.default_rng(3)).val_curve)
    assert curves[0] == curves[1]


def test_restored_snapshot_reproduces_best_val_loss(toy):
    mcfg, tcfg = small_configs(max_epochs=60, patience=10)
    model, x, paths = setup(toy, mcfg, tcfg)
    res = train_phase(model, toy, x, paths, tcfg, np.random.default_rng(0))
    _, val_loss = evaluate(model, toy, x, paths, toy.val)
    assert val_loss == pytest.approx(res.best_val_loss, abs=1e-6)
    assert res.best_val_loss == min(res.val_curve)


def test_evaluate_extremes(toy):
    mcfg, tcfg = small_configs()
    model, x, paths = setup(toy, mcfg, tcfg)
    with ad.no_grad():
        _, preds, _ = forward_loss(model, toy, x, paths, toy.test, 0.0, EVAL)
    right = Dataset(toy.graph, toy.features, preds, toy.splits, toy.num_classes)
    wrong = Dataset(toy.graph, toy.features, (preds + 1) % 3, toy.splits, toy.num_classes)
    assert evaluate(model, right, x, paths, toy.test)[0] == 1.0
    assert evaluate(model, wrong, x, paths, toy.test)[0] == 0.0


def test_untrained_accuracy_near_chance():
    ds = synthetic_citation_dataset(num_nodes=1600, num_classes=7, num_features=60, num_val=200,
                                    num_test=1000, seed=11)
    # labels independent of the model make hits Binomial(1000, 1/7)
    labels = np.random.default_rng(0).integers(0, 7, size=ds.num_nodes)
    ds = Dataset(ds.graph, ds.features, labels, ds.splits, 7)
    mcfg, tcfg = configs_for("cora")
    model = build_model(ds, mcfg, 0)
    x = prepare_features(ds, True, np.float64)
    paths = build_layer_paths(ds, mcfg, uniform_costs(ds.graph), 1.0)
    acc, _ = evaluate(model, ds, x, paths, ds.test)
    assert 0.08 <= acc <= 0.22


def test_paths_fixed_within_phase(toy, monkeypatch):
    calls = []
    real = training.build_layer_paths

    def spy(*args, **kwargs):
        calls.append(args[2].copy())
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "build_layer_paths", spy)
    mcfg, tcfg = small_configs(iterations=3, max_epochs=10)
    _, res, _ = iterative_train(toy, mcfg, tcfg)
    assert len(calls) == 3
    assert np.all(calls[0] == 1.0)
    assert [p["epochs"] for p in res.phases] == [10, 10, 10]


def test_regeneration_changes_paths():
    rng = np.random.default_rng(4)
    ds = synthetic_citation_dataset(num_nodes=80, num_classes=3, num_features=20, avg_degree=5.0,
                                    num_val=10, num_test=20, per_class=5, seed=4)
    mcfg, tcfg = configs_for("toy", hidden=4, heads1=2, iterations=2, max_epochs=30, ratio=0.5)
    model, res, paths = iterative_train(ds, mcfg, tcfg, seed=int(rng.integers(100)))
    assert len(res.phases) == 2
    uniform = build_pathset(ds.graph, uniform_costs(ds.graph), mcfg.max_len1, 0.5)
    assert not np.allclose(model.costs, 1.0)
    assert paths[0].pathset.to_json() != uniform.to_json()


def test_fix_beta_pipeline_runs(toy):
    mcfg, tcfg = small_configs(fix_beta=True, iterations=2, max_epochs=10)
    _, res, _ = iterative_train(toy, mcfg, tcfg)
    assert 0.0 <= res.test_acc <= 1.0


def test_multi_run_report(toy, tmp_path):
    mcfg, tcfg = small_configs(max_epochs=8)
    one = multi_run(toy, mcfg, tcfg, runs=1)
    assert one.std_acc == 0.0
    report = multi_run(toy, mcfg, tcfg, runs=3)
    accs = [r.test_acc for r in report.runs]
    assert report.mean_acc == pytest.approx(sum(accs) / 3, abs=1e-15)
    assert [r.seed for r in report.runs] == [0, 1, 2]
    report.write(tmp_path / "metrics.json")
    data = json.loads((tmp_path / "metrics.json").read_text())
    assert len(data["runs"]) == 3
    assert {"seed", "test_acc", "val_loss", "best_epoch"} <= set(data["runs"][0])
    assert data["config"]["train"]["runs"] == 3
    assert data["mean_acc"] == pytest.approx(np.mean([r["test_acc"] for r in data["runs"]]))
    assert data["std_acc"] == pytest.approx(np.std([r["test_acc"] for r in data["runs"]]))


def test_save_and_load_model(toy, tmp_path):
    mcfg, tcfg = small_configs(max_epochs=5, iterations=2)
    model, _, paths = iterative_train(toy, mcfg, tcfg)
    save_model(model, tmp_path / "m.npz")
    again = load_model(tmp_path / "m.npz", toy)
    assert all(np.array_equal(a.value, b.value) for a, b in zip(model.parameters(), again.parameters()))
    assert np.array_equal(again.costs, model.costs)
    x = prepare_features(toy, True, np.float64)
    assert evaluate(model, toy, x, paths, toy.test) == evaluate(again, toy, x, paths, toy.test)


def test_float32_training_runs(toy):
    mcfg, tcfg = small_configs(dtype="float32", max_epochs=5)
    _, res, _ = iterative_train(toy, mcfg, tcfg)
    assert np.isfinite(res.val_loss)


def test_train_config_defaults():
    t = TrainConfig()
    assert (t.max_epochs, t.patience, t.iterations, t.runs, t.ratio) == (1000, 100, 2, 10, 1.0)
