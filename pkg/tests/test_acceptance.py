"""Exit criteria. Each test prints one PASS/FAIL line with the measured numbers.

Run alone with ``pytest -m acceptance -s``.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from cocn.autodiff import Tape, Tensor, rank_approx_grad, stable_ranks
from cocn.convolution import DiagConvKernel, EdgeSet, diagonal_conv
from cocn.graph import erdos_renyi, grid_graph, load_tu_dataset, relabel, ring_graph, shortest_path_distances
from cocn.harness import experiments, gradsuite
from cocn.harness.training import TrainConfig, cross_validate
from cocn.model import CoCN, ModelConfig
from cocn.permutation import (
    absolute_position,
    hard_permutation,
    implicit_closed_form,
    implicit_least_squares,
    permute,
    relaxed_permutation,
    sparse_permutation,
)

pytestmark = pytest.mark.acceptance

DATA = Path(__file__).resolve().parents[1] / "data"

# settings chosen for the 10-fold MUTAG run; see README
MUTAG_MODEL = dict(heads=2, hidden=64, kernel_sizes=[5], tau=1.0, smoothness_t=6, position_hidden=[32])
MUTAG_TRAIN = dict(lr=1e-3, max_epochs=120, early_stop_patience=40, batch_size=8, folds=10, seed=0)


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
            print(f"\n{status} {name}: {detail}")
        return ok

    return emit


def test_relaxed_permutation_converges_to_hard(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    n, taus = 16, [0.1, 1.0, 10.0, 50.0]
    worst, monotone = 0.0, True
    for _ in range(100):
        r = rng.permutation(n).astype(float)  # tie-free absolute positions
        target = hard_permutation(r.astype(int))
        mass = []
        for tau in taus:
            P = relaxed_permutation(Tensor(r), tau).p_hat.data
            mass.append(P[target == 0].sum())
        worst = max(worst, np.abs(P - target).max())
        monotone &= all(b < a for a, b in zip(mass, mass[1:]))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and monotone and secs < 5
    report("relaxed permutation convergence", ok,
           f"max |P(tau=50) - P_hard| = {worst:.2e}, off-target mass decreasing = {monotone}, {secs:.2f}s")
    assert ok


def test_permutation_invariance(report):
    # structural twins (same neighbourhood, not adjacent) tie exactly after
    # smoothing, so tied draws are rejected and counted
    t0 = time.perf_counter()
    worst_x = worst_a = worst_logit = 0.0
    min_gap, used, rejected, seed = np.inf, 0, 0, 0
    while used < 50:
        rng = np.random.default_rng(seed)
        seed += 1
        n = int(rng.integers(2, 21))
        g = erdos_renyi(n, 3, rng)
        g = g.with_features(rng.normal(size=(n, 4)))
        model = CoCN(ModelConfig(heads=2, hidden=8, kernel_sizes=[2], in_dim=4, num_classes=3), seed=seed)

        def permuted(graph):
            X = model.node_features(graph)
            r_a = model.positions(graph, X)
            perm = relaxed_permutation(absolute_position(r_a, "dense"), model.cfg.tau)
            X_hat, A_hat = permute(perm, X, graph.adjacency())
            return X_hat.data, A_hat.data, r_a.data

        xg, ag, r = permuted(g)
        gap = np.diff(np.sort(r, axis=0), axis=0).min()
        if gap < 1e-9:
            rejected += 1
            continue
        used += 1
        min_gap = min(min_gap, gap)
        h = relabel(g, rng.permutation(n))
        xh, ah, _ = permuted(h)
        worst_x = max(worst_x, np.abs(xg - xh).max())
        worst_a = max(worst_a, np.abs(ag - ah).max())
        worst_logit = max(worst_logit, np.abs(model.forward_graph(g).data - model.forward_graph(h).data).max())
    secs = time.perf_counter() - t0
    ok = max(worst_x, worst_a, worst_logit) <= 1e-6 and secs < 30
    report("permutation invariance", ok,
           f"{used} tie-free graphs ({rejected} tied draws rejected, min position gap {min_gap:.1e}): "
           f"max gap X_hat {worst_x:.1e}, A_hat {worst_a:.1e}, logits {worst_logit:.1e}, {secs:.1f}s")
    assert ok


def test_gradient_suite(report):
    t0 = time.perf_counter()
    errors = gradsuite.run_suite()
    worst_case = max(errors, key=errors.get)
    rank_err = 0.0
    for n in range(1, 65):
        rng = np.random.default_rng(n)
        r_a = Tensor(rng.normal(size=n), requires_grad=True)
        g_up = rng.normal(size=n)
        with Tape() as tape:
            out = (rank_approx_grad(r_a) * Tensor(g_up)).sum()
        tape.backward(out)
        # dense Jacobian of 1/4 * sum_j relu(r_i - r_j)
        step = (r_a.data[:, None] - r_a.data[None, :] > 0).astype(float)
        jac = 0.25 * (np.diag(step.sum(axis=1)) - step)
        rank_err = max(rank_err, np.abs(r_a.grad - jac.T @ g_up).max())
    secs = time.perf_counter() - t0
    ok = errors[worst_case] < gradsuite.FD_TOLERANCE and rank_err <= 1e-6 and secs < 60
    report("gradient suite", ok,
           f"{len(errors)} cases, worst {worst_case} rel err {errors[worst_case]:.1e}; "
           f"rank backward vs dense oracle {rank_err:.1e} (n <= 64), {secs:.1f}s")
    assert ok


def loop_diag_conv(E, H, w, v, b, s):
    out, ce, k, _ = w.shape
    m = (H.shape[0] - k) // s + 1
    res = np.zeros((m, out))
    for j in range(m):
        i = s * j
        for o in range(out):
            acc = b[o]
            for p in range(k):
                for q in range(k):
                    for e in range(ce):
                        acc += w[o, e, p, q] * E[e, i + p, i + q]
                for t in range(H.shape[1]):
                    acc += v[o, t, p] * H[i + p, t]
            res[j, o] = acc
    return res


def test_brute_force_oracles(report):
    rng = np.random.default_rng(0)
    conv_err = 0.0
    for _ in range(40):
        n = int(rng.integers(1, 17))
        k = int(rng.integers(1, n + 1))
        s = int(rng.integers(1, 4))
        kern = DiagConvKernel.init(rng, 3, 2, 4, k)
        E, H = rng.normal(size=(2, n, n)), rng.normal(size=(n, 4))
        want = loop_diag_conv(E, H, kern.w.data, kern.v.data, kern.bias.data, s)
        for edges in (Tensor(E), EdgeSet.from_dense(E)):
            conv_err = max(conv_err, np.abs(diagonal_conv(edges, Tensor(H), kern, s).data - want).max())
    exact = True
    for seed in range(40):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        g = erdos_renyi(n, 3, rng)
        X, r_a = rng.normal(size=(n, 3)), rng.normal(size=n)
        perm = sparse_permutation(Tensor(r_a))
        P = hard_permutation(stable_ranks(r_a))
        xs, as_ = permute(perm, Tensor(X), g.adjacency())
        exact &= np.array_equal(perm.to_dense(), P)
        exact &= np.array_equal(xs.data, P @ X)
        exact &= np.array_equal(as_.data, P @ g.dense_adjacency() @ P.T)
    ok = conv_err <= 1e-12 and exact
    report("brute-force oracles (convolution, sparse permutation)", ok,
           f"diagonal conv vs loop {conv_err:.1e} (n <= 16); sparse == hard dense exactly: {exact}")
    assert ok


@pytest.mark.xfail(strict=True, reason="the constant vector solves the pairwise system exactly; see README")
def test_implicit_closed_form_matches_least_squares(report):
    gaps = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 11))
        d = shortest_path_distances(erdos_renyi(n, 3, rng)).d_scaled
        M, rhs = implicit_closed_form(d)
        gaps.append(np.abs(np.linalg.solve(M, rhs) - implicit_least_squares(d)).max())
    ok = max(gaps) <= 1e-8
    report("brute-force oracles (implicit closed form vs least squares)", ok,
           f"max gap {max(gaps):.2e}, median {np.median(gaps):.2e} over {len(gaps)} graphs (n <= 10)")
    assert ok


def test_reconstruction_ordering(report):
    t0 = time.perf_counter()
    parts, ok = [], True
    for name, g in (("ring32", ring_graph(32)), ("grid6x6", grid_graph(6, 6))):
        res = experiments.reconstruction_experiment(g, [0.1, 10.0])
        lo, hi = res[10.0][0], res[0.1][0]
        ok &= lo < hi
        parts.append(f"{name} MSE tau=10 {lo:.4f} vs tau=0.1 {hi:.4f}")
    secs = time.perf_counter() - t0
    ok &= secs < 300
    report("graph reconstruction", ok, "; ".join(parts) + f", {secs:.0f}s")
    assert ok


def test_isomorphism_random_pairs(report):
    t0 = time.perf_counter()
    pairs = experiments.random_nonisomorphic_pairs(500, 8, seed=0)
    max_deg = max(int(max(a.degrees().max(), b.degrees().max())) for a, b in pairs)
    mcfg = experiments.isomorphism_model_config(max_deg)
    count, dist = experiments.isomorphism_test(pairs, mcfg)
    secs = time.perf_counter() - t0
    ok = count == 0 and secs < 600
    report("isomorphism, 500 random 8-node pairs", ok,
           f"undistinguished {count}, min distance {dist.min():.2e}, "
           f"{CoCN(mcfg).num_parameters()} parameters, {secs:.0f}s")
    assert ok


def test_isomorphism_sr25(report):
    path = Path(os.environ.get("COCN_SR25", DATA / "sr25.g6"))
    if not path.exists():
        report("isomorphism, sr25", None, f"{path} not found (set COCN_SR25 to a graph6 file)")
        pytest.skip(f"sr25 graph6 file not found at {path}")
    graphs, pairs = experiments.load_graph6_pairs(path)
    mcfg = experiments.isomorphism_model_config(max(int(g.degrees().max()) for g in graphs))
    count, _ = experiments.isomorphism_test(pairs, mcfg)
    ok = count == 0
    report("isomorphism, sr25", ok, f"undistinguished {count} of {len(pairs)} pairs")
    assert ok


def test_mutag_cross_validation(report):
    t0 = time.perf_counter()
    ds = load_tu_dataset(DATA / "MUTAG")
    mcfg = ModelConfig(in_dim=ds.feature_dim, num_classes=ds.num_classes, **MUTAG_MODEL)
    result = cross_validate(ds, mcfg, TrainConfig(**MUTAG_TRAIN))
    secs = time.perf_counter() - t0
    mean = result.mean_accuracy
    ok = mean >= 0.80 and secs < 45 * 60
    report("MUTAG 10-fold CV", ok,
           f"mean accuracy {mean:.4f} +- {result.std_accuracy:.4f}, folds "
           f"{np.round(result.accuracies, 3).tolist()}, {secs / 60:.1f} min")
    assert ok


def test_scaling_trend(report):
    t0 = time.perf_counter()
    rows = experiments.timing_benchmark(["segment", "expanded"], [1000, 5000])
    secs = {(r["variant"], r["n"]): r["seconds"] for r in rows}
    seg = secs["segment", 5000] / secs["segment", 1000]
    exp = secs["expanded", 5000] / secs["expanded", 1000]
    refused = experiments.timing_benchmark(["expanded"], [experiments.EXPANDED_NODE_CAP + 1])[0]
    elapsed = time.perf_counter() - t0
    ok = seg < exp and refused["status"] == "refused" and elapsed < 600
    report("scaling trend", ok,
           f"epoch time growth 1000 -> 5000: segment x{seg:.1f}, expanded x{exp:.1f}; "
           f"expanded at n={refused['n']}: {refused['status']}, {elapsed:.0f}s")
    assert ok
