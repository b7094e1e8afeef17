import itertools
import json
from pathlib import Path

import networkx as nx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cocn.graph import Dataset, Graph, grid_graph, load_tu_dataset, relabel, ring_graph
from cocn.harness import experiments
from cocn.harness.cli import main
from cocn.harness.io import read_csv, read_pgm, write_csv, write_pgm
from cocn.harness.training import (
    DivergenceError,
    EarlyStopper,
    TrainConfig,
    accuracy,
    cross_validate,
    fit_graphs,
    roc_auc,
    stratified_folds,
    train_node_task,
)
from cocn.model import CoCN, ConfigError, ModelConfig

MUTAG = Path(__file__).resolve().parents[1] / "data" / "MUTAG"


def small_mutag(count=24):
    ds = load_tu_dataset(MUTAG)
    labels = ds.labels()
    idx = np.concatenate([np.flatnonzero(labels == c)[: count // 2] for c in (0, 1)])
    return Dataset([ds.graphs[i] for i in idx], ds.task, ds.num_classes, "MUTAG-small")


def tiny_model_cfg(**kw):
    base = dict(heads=1, hidden=8, kernel_sizes=[2], in_dim=7, num_classes=2, position_hidden=[4])
    base.update(kw)
    return ModelConfig(**base)


def to_nx(g):
    h = nx.Graph()
    h.add_nodes_from(range(g.n))
    h.add_edges_from(g.edges.tolist())
    return h


# metrics ---------------------------------------------------------------------------


def test_accuracy_perfect():
    labels = np.array([0, 2, 1, 1])
    assert accuracy(np.eye(3)[labels], labels) == 1.0


def test_auc_random_scorer_near_half():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 500)
    auc = roc_auc(rng.random(1000), labels)
    assert 0.4 <= auc <= 0.6


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.integers(10, 200), k=st.integers(2, 10))
def test_folds_partition(seed, size, k):
    labels = np.random.default_rng(seed).integers(0, 3, size=size)
    folds = stratified_folds(labels, k, np.random.default_rng(seed))
    assert len(folds) == k
    allidx = np.concatenate(folds)
    np.testing.assert_array_equal(np.sort(allidx), np.arange(size))


# early stopping ------------------------------------------------------------------------


def test_early_stop_constant_loss_patience_one():
    stopper = EarlyStopper(1)
    evaluations = 0
    for epoch in range(10):
        evaluations += 1
        if stopper.update(1.0, epoch):
            break
    assert evaluations == 2


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=5, early_stop_patience=10)
    with pytest.raises(ConfigError):
        TrainConfig(folds=1)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1e-3, "momentum": 0.9})


# training --------------------------------------------------------------------------


def test_training_loss_decreases_on_toy_pair():
    ds = small_mutag(2)
    model = CoCN(tiny_model_cfg(), seed=0)
    tcfg = TrainConfig(lr=1e-2, max_epochs=10, early_stop_patience=10, batch_size=2, weight_decay=0.0)
    rng = np.random.default_rng(0)
    train, _, _, _, _ = fit_graphs(model, ds.graphs, ds.labels(), ds.graphs, ds.labels(), tcfg, rng)
    assert all(b < a for a, b in zip(train, train[1:]))


def test_cross_validation_deterministic():
    ds = small_mutag()
    tcfg = TrainConfig(max_epochs=3, early_stop_patience=3, folds=3, seed=5)
    a = cross_validate(ds, tiny_model_cfg(), tcfg)
    b = cross_validate(ds, tiny_model_cfg(), tcfg)
    assert len(a.folds) == 3
    np.testing.assert_array_equal(a.accuracies, b.accuracies)
    report = a.to_dict()
    assert report["std_accuracy"] == pytest.approx(np.std(a.accuracies))
    assert 0 <= report["mean_auc"] <= 1


def test_cross_validation_task_mismatch():
    with pytest.raises(ConfigError):
        cross_validate(small_mutag(), tiny_model_cfg(task="node"), TrainConfig(folds=2))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_restores_best_weights():
    ds = small_mutag(4)
    model = CoCN(tiny_model_cfg(), seed=0)
    before = model.state_arrays()
    tcfg = TrainConfig(lr=1e300, max_epochs=5, early_stop_patience=5, batch_size=2)
    with pytest.raises(DivergenceError):
        fit_graphs(model, ds.graphs, ds.labels(), ds.graphs, ds.labels(), tcfg, np.random.default_rng(0))
    for p, q in zip(model.state_arrays(), before):
        assert np.isfinite(p).all()
        np.testing.assert_array_equal(p, q)


def test_node_task_training_runs():
    rng = np.random.default_rng(0)
    g = grid_graph(5, 5)
    labels = (g.features[:, 0] > 2).astype(int)
    g = Graph(g.n, g.edges, g.features, node_labels=labels)
    mcfg = ModelConfig(task="node", heads=1, hidden=8, kernel_sizes=[2], in_dim=2, num_classes=2)
    idx = rng.permutation(25)
    report, _ = train_node_task(g, mcfg, TrainConfig(max_epochs=5, early_stop_patience=5),
                                idx[:15], idx[15:20], idx[20:])
    assert 0 <= report.mean_accuracy <= 1
    assert len(report.folds[0].train_loss) == 5


# isomorphism harness --------------------------------------------------------------------


def test_isomorphism_self_pair_indistinguishable():
    g = Graph(6, [(0, 1), (1, 2), (2, 3), (3, 4), (1, 5)])
    count, dist = experiments.isomorphism_test([(g, g)], experiments.isomorphism_model_config(3))
    assert count == 1 and dist[0] == 0


def test_isomorphism_one_edge_difference_distinguished():
    a = Graph(8, [(i, i + 1) for i in range(7)])
    b = Graph(8, [(i, i + 1) for i in range(7)] + [(0, 7)])
    count, dist = experiments.isomorphism_test([(a, b)], experiments.isomorphism_model_config(2))
    assert count == 0 and dist[0] > 1e-4


def test_isomorphism_requires_implicit_mode():
    with pytest.raises(ConfigError):
        experiments.isomorphism_test([], tiny_model_cfg())


def test_isomorphism_parameter_budget():
    mcfg = experiments.isomorphism_model_config(7)
    assert CoCN(mcfg).num_parameters() <= experiments.ISO_PARAM_BUDGET
    with pytest.raises(ConfigError, match="parameters"):
        experiments.isomorphism_test([(ring_graph(8), ring_graph(8))],
                                     experiments.isomorphism_model_config(7, hidden=128))


def test_canonical_form_matches_networkx():
    rng = np.random.default_rng(0)
    iu = np.triu_indices(6, 1)
    graphs = []
    for _ in range(25):
        mask = rng.random(iu[0].size) < 0.4
        graphs.append(Graph(6, np.stack([iu[0][mask], iu[1][mask]], 1)))
    for a, b in itertools.combinations(graphs, 2):
        same = experiments.canonical_form(a) == experiments.canonical_form(b)
        assert same == nx.is_isomorphic(to_nx(a), to_nx(b))


def test_canonical_form_invariant_to_relabeling():
    g = Graph(7, [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5)])
    h = relabel(g, np.random.default_rng(1).permutation(7))
    assert experiments.canonical_form(g) == experiments.canonical_form(h)


def test_random_pairs_are_non_isomorphic():
    pairs = experiments.random_nonisomorphic_pairs(20, 8, seed=3)
    assert len(pairs) == 20
    for a, b in pairs:
        assert a.n == b.n == 8
        assert len(a.edges) == len(b.edges)
        assert not nx.is_isomorphic(to_nx(a), to_nx(b))


def test_graph6_pairs(tmp_path):
    path = tmp_path / "g.g6"
    nx.write_graph6(nx.petersen_graph(), path)
    graphs, pairs = experiments.load_graph6_pairs(path)
    assert len(graphs) == 1 and pairs == []


# reconstruction and timing ------------------------------------------------------------


def test_reconstruction_tau_ordering_and_csv(tmp_path):
    g = grid_graph(6, 6)
    res = experiments.reconstruction_experiment(g, [0.1, 10.0], steps=150)
    assert res[10.0][0] < res[0.1][0]
    rows = experiments.reconstruction_rows(g, res[10.0][1])
    path = tmp_path / "rec.csv"
    write_csv(path, rows, experiments.RECONSTRUCTION_COLUMNS)
    back = read_csv(path)
    assert len(back) == 36
    assert back == rows


def test_reconstruction_needs_coordinates():
    with pytest.raises(ConfigError):
        experiments.reconstruction_experiment(Graph(3, [(0, 1)]), [1.0])


def test_timing_rows_for_each_variant():
    rows = experiments.timing_benchmark(["vanilla", "sparse", "segment"], [100])
    assert [r["variant"] for r in rows] == ["vanilla", "sparse", "segment"]
    assert all(r["status"] == "ok" and r["seconds"] > 0 for r in rows)


def test_timing_refuses_expanded_above_cap():
    rows = experiments.timing_benchmark(["expanded"], [experiments.EXPANDED_NODE_CAP + 1])
    assert rows[0]["status"] == "refused" and rows[0]["seconds"] is None


def test_timing_reports_oom_rows(monkeypatch):
    def boom(*a, **k):
        raise MemoryError

    monkeypatch.setattr(experiments, "time_epoch", boom)
    rows = experiments.timing_benchmark(["sparse"], [50])
    assert rows[0]["status"] == "oom"


# io --------------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=10))
def test_csv_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "x.csv"
    rows = [{"i": i, "v": v, "tag": "ok"} for i, v in enumerate(values)]
    write_csv(path, rows, ["i", "v", "tag"])
    back = read_csv(path)
    assert [r["i"] for r in back] == list(range(len(values)))
    assert [float(r["v"]) for r in back] == values


def test_pgm_round_trip(tmp_path):
    m = np.array([[0.0, 1.0], [2.0, 4.0]])
    write_pgm(tmp_path / "a.pgm", m)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 64], [128, 255]])


# command line ------------------------------------------------------------------------


def test_cli_unknown_flag_exit_1(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_unknown_command_exit_1():
    assert main(["frobnicate"]) == 1


def test_cli_bad_config_exit_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden": 8, "warp": 9}))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_cli_missing_data_exit_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")]) == 1


def test_cli_runtime_failure_exit_2(tmp_path, monkeypatch):
    from cocn.harness import cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "cross_validate", boom)
    assert main(["train", "--out", str(tmp_path / "o")]) == 2


def test_cli_train_and_eval(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"hidden": 8, "kernel_sizes": [2], "position_hidden": [4]},
                               "train": {"max_epochs": 2, "early_stop_patience": 2}}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--folds", "2", "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert len(metrics["folds"]) == 2
    assert metrics["model"]["hidden"] == 8
    assert len(read_csv(out / "folds.csv")) == 2
    assert main(["eval", "--checkpoint", str(out / "checkpoint.cocn"), "--out", str(out / "ev")]) == 0
    assert 0 <= json.loads((out / "ev" / "metrics.json").read_text())["accuracy"] <= 1


def test_cli_seed_precedence(tmp_path, monkeypatch):
    from cocn.harness import cli

    assert cli._seed({"seed": 3}, None) == 3
    monkeypatch.setenv("COCN_SEED", "11")
    assert cli._seed({"seed": 3}, None) == 11
    assert cli._seed({"seed": 3}, 7) == 7


def test_cli_gradcheck(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "conv_stack.H" in out and "max rel err" in out


def test_cli_isotest_random(capsys):
    assert main(["isotest", "--data", "random", "--pairs", "5", "--seeds", "2"]) == 0
    assert "undistinguished pairs: 0 of 5" in capsys.readouterr().out


def test_cli_isotest_missing_sr25(tmp_path, monkeypatch):
    monkeypatch.setenv("COCN_SR25", str(tmp_path / "absent.g6"))
    assert main(["isotest", "--data", "sr25"]) == 1


def test_cli_reconstruct_permviz_bench(tmp_path):
    assert main(["reconstruct", "--graph", "ring:12", "--taus", "1", "--steps", "5",
                 "--out", str(tmp_path / "r")]) == 0
    assert len(read_csv(tmp_path / "r" / "reconstruction_tau1.csv")) == 12
    assert main(["permviz", "--data", "grid:4x4", "--tau", "2", "--t", "2", "--out", str(tmp_path / "p")]) == 0
    assert read_pgm(tmp_path / "p" / "adjacency.pgm").shape == (16, 16)
    assert read_pgm(tmp_path / "p" / "features.pgm").shape == (16, 16)
    assert main(["bench", "--variants", "sparse", "--sizes", "60", "--out", str(tmp_path / "b")]) == 0
    assert read_csv(tmp_path / "b" / "timings.csv")[0]["variant"] == "sparse"


def test_cli_permviz_edge_list(tmp_path):
    f = tmp_path / "g.txt"
    f.write_text("0 1\n1 2\n2 3\n")
    assert main(["permviz", "--data", str(f), "--out", str(tmp_path / "p")]) == 0
