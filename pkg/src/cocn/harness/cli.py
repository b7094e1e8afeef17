"""Command-line entry point: ``cocn <subcommand> [options]``.

Exit codes: 0 on success, 1 on invalid input (bad flags, config or data),
2 on failures while running.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from ..graph import (
    CapacityError,
    GraphFormatError,
    IntegrityError,
    LoadError,
    degree_onehot_features,
    grid_graph,
    load_edge_list,
    load_tu_dataset,
    normalized_adjacency,
    ring_graph,
)
from ..model import CoCN, ConfigError, ModelConfig
from ..permutation import (
    PositionRegressor,
    absolute_position,
    permute,
    regress_position_explicit,
    relaxed_permutation,
)
from . import experiments, gradsuite
from .io import write_csv, write_json, write_pgm
from .training import TrainConfig, accuracy, cross_validate, evaluate_graphs

log = logging.getLogger("cocn")

REPO_DATA = Path(__file__).resolve().parents[3] / "data"
FOLD_COLUMNS = ["fold", "accuracy", "auc", "epochs", "best_epoch", "epoch_seconds"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _ints(text):
    return [int(v) for v in text.split(",") if v]


# ------------------------------------------------------------------ configs


def load_config(path):
    """Split a JSON config into (model dict, train dict).

    Accepts either ``{"model": {...}, "train": {...}}`` or a flat object whose
    keys are ModelConfig / TrainConfig field names.
    """
    if path is None:
        return {}, {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if set(raw) <= {"model", "train"}:
        return dict(raw.get("model", {})), dict(raw.get("train", {}))
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return ({k: v for k, v in raw.items() if k in model_keys},
            {k: v for k, v in raw.items() if k in train_keys})


def _seed(train_cfg, flag):
    """Config seed, overridden by COCN_SEED, overridden by --seed."""
    seed = train_cfg.get("seed", 0)
    env = os.environ.get("COCN_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"COCN_SEED must be an integer, got {env!r}") from None
    return flag if flag is not None else seed


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_dir(arg):
    if arg is None:
        return REPO_DATA / "MUTAG"
    path = Path(arg)
    if not path.exists() and (REPO_DATA / arg).exists():
        return REPO_DATA / arg
    return path


# ---------------------------------------------------------------- commands


def cmd_train(args):
    mdict, tdict = load_config(args.config)
    for key, flag in (("variant", args.variant), ("heads", args.heads), ("hidden", args.hidden),
                      ("tau", args.tau)):
        if flag is not None:
            mdict[key] = flag
    for key, flag in (("folds", args.folds), ("max_epochs", args.epochs), ("lr", args.lr)):
        if flag is not None:
            tdict[key] = flag
    if args.epochs is not None and "early_stop_patience" not in tdict:
        tdict["early_stop_patience"] = min(args.epochs, TrainConfig.early_stop_patience)
    tdict["seed"] = _seed(tdict, args.seed)
    dataset = load_tu_dataset(_dataset_dir(args.data))
    mdict.setdefault("in_dim", dataset.feature_dim)
    mdict.setdefault("num_classes", dataset.num_classes)
    mcfg = ModelConfig.from_dict(mdict)
    tcfg = TrainConfig.from_dict(tdict)
    out = _out_dir(args.out)

    best = {"acc": -1.0}

    def on_fold(result, model):
        print(f"fold {result.fold}: accuracy {result.accuracy:.4f} "
              f"({result.epochs} epochs, {result.epoch_seconds:.2f} s/epoch)", flush=True)
        if result.accuracy > best["acc"]:
            best["acc"] = result.accuracy
            model.save(out / "checkpoint.cocn")

    t0 = time.perf_counter()
    report = cross_validate(dataset, mcfg, tcfg, on_fold)
    metrics = report.to_dict()
    metrics.update(model=mcfg.to_dict(), train=tcfg.to_dict(), dataset=dataset.name,
                   seconds=time.perf_counter() - t0)
    write_json(out / "metrics.json", metrics)
    write_csv(out / "folds.csv", [vars(f) for f in report.folds], FOLD_COLUMNS)
    print(f"mean accuracy {report.mean_accuracy:.4f} +- {report.std_accuracy:.4f} "
          f"over {len(report.folds)} folds")
    return 0


def cmd_eval(args):
    model = CoCN.load(args.checkpoint)
    dataset = load_tu_dataset(_dataset_dir(args.data))
    labels = dataset.labels()
    loss, logits = evaluate_graphs(model, dataset.graphs, labels)
    acc = accuracy(logits, labels)
    print(f"accuracy {acc:.4f} loss {loss:.4f} on {len(dataset)} graphs")
    if args.out:
        write_json(_out_dir(args.out) / "metrics.json",
                   {"accuracy": acc, "loss": loss, "dataset": dataset.name})
    return 0


def _iso_pairs(data, count, seed):
    if data == "random":
        return experiments.random_nonisomorphic_pairs(count, 8, seed)
    if data == "sr25":
        env = os.environ.get("COCN_SR25")
        path = Path(env) if env else REPO_DATA / "sr25.g6"
        if not path.exists():
            raise LoadError(f"sr25 graph6 file not found at {path}; set COCN_SR25")
    else:
        path = Path(data)
        if not path.exists():
            raise LoadError(f"graph6 file not found: {path}")
    return experiments.load_graph6_pairs(path)[1]


def cmd_isotest(args):
    mdict, _ = load_config(args.config)
    pairs = _iso_pairs(args.data, args.pairs, _seed({}, args.seed))
    max_degree = max(int(g.degrees().max(initial=0)) for p in pairs for g in p)
    mcfg = experiments.isomorphism_model_config(max_degree, **mdict)
    count, dist = experiments.isomorphism_test(pairs, mcfg, args.eps, tuple(range(args.seeds)))
    print(f"undistinguished pairs: {count} of {len(pairs)} (eps {args.eps:g}, "
          f"{args.seeds} seeds, min distance {dist.min():.3e})")
    if args.out:
        write_json(_out_dir(args.out) / "metrics.json", {
            "undistinguished": count, "pairs": len(pairs), "eps": args.eps,
            "seeds": args.seeds, "min_distance": float(dist.min()),
        })
    return 0


def _named_graph(text):
    """ring[:n], grid[:RxC] or an edge-list path."""
    name, _, size = text.partition(":")
    if name == "ring":
        return ring_graph(int(size or 32))
    if name == "grid":
        r, _, c = (size or "6x6").partition("x")
        return grid_graph(int(r), int(c or r))
    return load_edge_list(text)


def cmd_reconstruct(args):
    g = _named_graph(args.graph)
    if g.features is None:
        raise ConfigError("reconstruction needs a ring or grid graph with coordinates")
    out = _out_dir(args.out)
    results = experiments.reconstruction_experiment(
        g, args.taus, steps=args.steps, seed=_seed({}, args.seed)
    )
    summary = []
    for tau, (mse, X_rec) in results.items():
        print(f"tau {tau:g}: mse {mse:.3e}")
        write_csv(out / f"reconstruction_tau{tau:g}.csv",
                  experiments.reconstruction_rows(g, X_rec), experiments.RECONSTRUCTION_COLUMNS)
        summary.append({"tau": tau, "mse": mse})
    write_csv(out / "mse.csv", summary, ["tau", "mse"])
    return 0


def cmd_permviz(args):
    g = _named_graph(args.data)
    X = g.features
    if X is None:
        X = degree_onehot_features(g, int(g.degrees().max(initial=0)))
    reg = PositionRegressor(X.shape[1], (16,), 1, args.t, seed=_seed({}, args.seed))
    r_a = regress_position_explicit(X, normalized_adjacency(g), reg)[:, 0]
    perm = relaxed_permutation(absolute_position(r_a), args.tau)
    X_hat, A_hat = permute(perm, X, g.adjacency())
    out = _out_dir(args.out)
    write_pgm(out / "adjacency.pgm", A_hat.data)
    write_pgm(out / "features.pgm", (X_hat @ X_hat.T).data)
    write_pgm(out / "permutation.pgm", perm.p_hat.data)
    print(f"wrote adjacency.pgm, features.pgm, permutation.pgm to {out}")
    return 0


def cmd_gradcheck(args):
    results = gradsuite.run_suite()
    width = max(map(len, results))
    failed = 0
    for name, err in results.items():
        ok = err < gradsuite.FD_TOLERANCE
        failed += not ok
        print(f"{name:<{width}}  max rel err {err:.2e}  {'ok' if ok else 'FAIL'}")
    print(f"{len(results) - failed}/{len(results)} within {gradsuite.FD_TOLERANCE:g}")
    return 0 if failed == 0 else 2


def cmd_bench(args):
    rows = experiments.timing_benchmark(args.variants, args.sizes, args.avg_degree,
                                        seed=_seed({}, args.seed))
    for row in rows:
        secs = "-" if row["seconds"] is None else f"{row['seconds']:.3f} s"
        print(f"{row['variant']:>8} n={row['n']:<7} {secs:>10}  {row['status']}")
    if args.out:
        write_csv(_out_dir(args.out) / "timings.csv", rows, experiments.BENCH_COLUMNS)
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = _Parser(prog="cocn", description="Compressed convolution networks on graphs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="k-fold cross-validation on a TU dataset")
    t.add_argument("--config")
    t.add_argument("--data", help="TU dataset directory (default: bundled MUTAG)")
    t.add_argument("--folds", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--variant")
    t.add_argument("--heads", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--tau", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a TU dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("isotest", help="count undistinguished non-isomorphic pairs")
    i.add_argument("--data", default="random", help="'random', 'sr25' or a graph6 file")
    i.add_argument("--eps", type=float, default=1e-4)
    i.add_argument("--pairs", type=int, default=500, help="pair count for --data random")
    i.add_argument("--seeds", type=int, default=5)
    i.add_argument("--config")
    i.add_argument("--seed", type=int)
    i.add_argument("--out")
    i.set_defaults(func=cmd_isotest)

    r = sub.add_parser("reconstruct", help="coordinate autoencoder through relaxed permutations")
    r.add_argument("--graph", default="ring:32", help="ring[:n], grid[:RxC]")
    r.add_argument("--taus", type=_floats, default=[0.1, 1.0, 10.0])
    r.add_argument("--steps", type=int, default=300)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="runs/reconstruct")
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("permviz", help="PGM heatmaps of permuted adjacency and features")
    v.add_argument("--data", default="ring:32", help="edge-list path, ring[:n] or grid[:RxC]")
    v.add_argument("--tau", type=float, default=1.0)
    v.add_argument("--t", type=int, default=1, help="smoothing steps")
    v.add_argument("--seed", type=int)
    v.add_argument("--out", default="runs/permviz")
    v.set_defaults(func=cmd_permviz)

    g = sub.add_parser("gradcheck", help="finite-difference check of every smooth op")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="epoch time per variant on random graphs")
    b.add_argument("--variants", type=lambda s: s.split(","), default=["vanilla", "sparse", "segment"])
    b.add_argument("--sizes", type=_ints, default=[1000, 5000])
    b.add_argument("--avg-degree", type=float, default=8)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)
    return p


VALIDATION_ERRORS = (ConfigError, GraphFormatError, IntegrityError, LoadError, CapacityError,
                     json.JSONDecodeError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
