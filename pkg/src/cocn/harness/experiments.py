"""Isomorphism test, graph reconstruction and timing benchmark drivers."""

import gc
import itertools
import time

import numpy as np

from ..autodiff import Parameter, Tape, adam_step, no_grad, ops
from ..graph import Graph, erdos_renyi, normalized_adjacency
from ..model import CoCN, ConfigError, ModelConfig
from ..permutation import (
    PositionRegressor,
    absolute_position,
    regress_position_explicit,
    relaxed_permutation,
)

# ---------------------------------------------------------------- isomorphism

ISO_PARAM_BUDGET = 30_000


def isomorphism_model_config(max_degree, **overrides):
    """Default graph-level config for the isomorphism test (implicit positions)."""
    base = dict(
        variant="vanilla", task="graph", heads=2, L1=1, L2=1, kernel_sizes=[2],
        hidden=32, tau=1.0, position_mode="implicit", in_dim=max_degree + 1,
        max_degree=max_degree, num_classes=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def embed_graphs(model, graphs):
    with no_grad():
        return np.stack([model.embed(g).data.ravel() for g in graphs])


def isomorphism_test(pairs, mcfg, epsilon=1e-4, seeds=(0, 1, 2, 3, 4)):
    """Count pairs whose pooled embeddings stay within ``epsilon`` (max-norm) for every seed.

    Returns (count, per-pair max distance over seeds).
    """
    if mcfg.position_mode != "implicit":
        raise ConfigError("the isomorphism test uses implicit positions")
    graphs = []
    index = {}
    for a, b in pairs:
        for g in (a, b):
            if id(g) not in index:
                index[id(g)] = len(graphs)
                graphs.append(g)
    undistinguished = np.ones(len(pairs), dtype=bool)
    max_dist = np.zeros(len(pairs))
    for seed in seeds:
        model = CoCN(mcfg, seed=seed)
        if model.num_parameters() > ISO_PARAM_BUDGET:
            raise ConfigError(
                f"isomorphism model has {model.num_parameters()} parameters (> {ISO_PARAM_BUDGET})"
            )
        emb = embed_graphs(model, graphs)
        for p, (a, b) in enumerate(pairs):
            d = np.abs(emb[index[id(a)]] - emb[index[id(b)]]).max()
            max_dist[p] = max(max_dist[p], d)
            undistinguished[p] &= d < epsilon
    return int(undistinguished.sum()), max_dist


_PERM_CACHE = {}


def canonical_form(g):
    """Lexicographically smallest upper-triangle bit string over all relabelings.

    Brute force over n! permutations, so only for small graphs (n <= 9).
    """
    n = g.n
    if n > 9:
        raise ValueError(f"brute-force canonical labeling is limited to n <= 9, got {n}")
    if n not in _PERM_CACHE:
        _PERM_CACHE[n] = np.array(list(itertools.permutations(range(n))), dtype=np.int8)
    perms = _PERM_CACHE[n]
    A = g.dense_adjacency().astype(np.uint8)
    iu = np.triu_indices(n, 1)
    bits = A[perms[:, iu[0]], perms[:, iu[1]]].astype(np.int64)
    codes = bits @ (1 << np.arange(bits.shape[1] - 1, -1, -1, dtype=np.int64))
    return int(codes.min())


def random_nonisomorphic_pairs(count, n=8, seed=0):
    """Pairs of random n-node graphs proven non-isomorphic by canonical labeling.

    Half the pairs keep the degree sequence (random double-edge swaps), the
    other half only the edge count.
    """
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    pairs = []
    while len(pairs) < count:
        m = int(rng.integers(n - 1, len(iu[0]) - n + 2))
        chosen = rng.choice(len(iu[0]), size=m, replace=False)
        a = Graph(n, np.stack([iu[0][chosen], iu[1][chosen]], axis=1))
        if len(pairs) % 2 == 0:
            b = _double_edge_swap(a, rng)
        else:
            other = rng.choice(len(iu[0]), size=m, replace=False)
            b = Graph(n, np.stack([iu[0][other], iu[1][other]], axis=1))
        if b is None or canonical_form(a) == canonical_form(b):
            continue
        pairs.append((a, b))
    return pairs


def _double_edge_swap(g, rng, tries=50):
    edges = {tuple(e) for e in g.edges.tolist()}
    el = sorted(edges)
    for _ in range(tries):
        i, j = rng.choice(len(el), size=2, replace=False)
        (a, b), (c, d) = el[i], el[j]
        if len({a, b, c, d}) < 4:
            continue
        e1, e2 = tuple(sorted((a, d))), tuple(sorted((c, b)))
        if e1 in edges or e2 in edges:
            continue
        new = (edges - {el[i], el[j]}) | {e1, e2}
        return Graph(g.n, sorted(new))
    return None


def load_graph6_pairs(path):
    """All unordered pairs of graphs from a graph6 file (e.g. sr25: 15 graphs, 105 pairs)."""
    import networkx as nx

    loaded = nx.read_graph6(str(path))
    if isinstance(loaded, nx.Graph):  # single-graph files come back unwrapped
        loaded = [loaded]
    graphs = [Graph(h.number_of_nodes(), list(h.edges())) for h in loaded]
    return graphs, list(itertools.combinations(graphs, 2))


# ------------------------------------------------------------- reconstruction


def reconstruction_experiment(graph, taus, steps=300, lr=0.01, t=1, hidden=(16,), seed=0):
    """Permute coordinates with a learned ordering, map them, and map back with P^T.

    The autoencoder is ``X_rec = P^T (P X W + b)``: the position regressor,
    ``W`` and ``b`` are trained jointly to minimize the reconstruction MSE.
    Returns {tau: (mse, X_rec)}.
    """
    X = graph.features
    if X is None:
        raise ConfigError("reconstruction needs coordinate features")
    A_norm = normalized_adjacency(graph)
    results = {}
    for tau in taus:
        rng = np.random.default_rng(seed)
        reg = PositionRegressor(X.shape[1], hidden, 1, t, rng=rng)
        W = Parameter(np.eye(X.shape[1]) + 0.1 * rng.normal(size=(X.shape[1],) * 2), name="W")
        b = Parameter(np.zeros(X.shape[1]), name="b")
        params = reg.parameters() + [W, b]

        def forward():
            r_a = regress_position_explicit(X, A_norm, reg)[:, 0]
            r = absolute_position(r_a, "dense")
            P = relaxed_permutation(r, tau).p_hat
            X_rec = P.T @ (P @ X @ W + b)
            return ops.mean((X_rec - X) * (X_rec - X)), X_rec

        for _ in range(steps):
            with Tape() as tape:
                loss, _ = forward()
            tape.backward(loss)
            adam_step(params, lr)
            for p in params:
                p.grad = None
        with no_grad():
            loss, X_rec = forward()
        results[tau] = (loss.item(), X_rec.data)
    return results


# ------------------------------------------------------------------ timing

EXPANDED_NODE_CAP = 20_000


def benchmark_config(variant, in_dim, **overrides):
    base = dict(
        variant=variant, task="node", heads=1, L1=1, L2=1, kernel_sizes=[2], hidden=16,
        tau=1.0, smoothness_t=1, position_hidden=[16], in_dim=in_dim, num_classes=2,
        segment_b=8, segment_batch_nb=1000,
    )
    if variant == "expanded":
        base["residual"] = True
    base.update(overrides)
    return ModelConfig(**base)


def time_epoch(model, g, labels, lr=1e-3):
    """Seconds for one full training epoch (forward, backward, update) on one graph."""
    params = model.parameters()
    t0 = time.perf_counter()
    with Tape() as tape:
        loss = ops.cross_entropy(model.forward_node(g, train=True), labels)
    tape.backward(loss)
    adam_step(params, lr)
    for p in params:
        p.grad = None
    return time.perf_counter() - t0


def timing_benchmark(variants, sizes, avg_degree=8, seed=0, feature_dim=8, **overrides):
    """Wall-clock seconds per epoch for each (variant, n); failures become marked rows."""
    rows = []
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        g = erdos_renyi(n, avg_degree, rng)
        g = g.with_features(rng.normal(size=(n, feature_dim)))
        labels = rng.integers(0, 2, size=n)
        for variant in variants:
            row = {"variant": variant, "n": n, "avg_degree": avg_degree, "seconds": None,
                   "status": "ok"}
            if variant in ("vanilla", "expanded") and n > EXPANDED_NODE_CAP:
                row["status"] = "refused"
                rows.append(row)
                continue
            try:
                model = CoCN(benchmark_config(variant, feature_dim, **overrides), seed=seed)
                row["seconds"] = time_epoch(model, g, labels)
            except MemoryError:
                row["status"] = "oom"
            finally:
                gc.collect()
            rows.append(row)
    return rows


def reconstruction_rows(graph, X_rec):
    """CSV rows node,x,y,x_rec,y_rec."""
    X = graph.features
    return [
        {"node": i, "x": float(X[i, 0]), "y": float(X[i, 1]),
         "x_rec": float(X_rec[i, 0]), "y_rec": float(X_rec[i, 1])}
        for i in range(graph.n)
    ]


RECONSTRUCTION_COLUMNS = ["node", "x", "y", "x_rec", "y_rec"]
BENCH_COLUMNS = ["variant", "n", "avg_degree", "seconds", "status"]
