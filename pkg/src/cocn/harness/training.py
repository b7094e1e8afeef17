"""Training loops, cross-validation and metrics."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import rankdata

from ..autodiff import Tape, adam_step, no_grad, ops
from ..model import CoCN, ConfigError, ModelConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 200
    early_stop_patience: int = 100
    batch_size: int = 8
    seed: int = 0
    folds: int = 10
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ConfigError("early_stop_patience must lie in [1, max_epochs]")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2 for cross-validation")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    auc: float | None
    epochs: int
    best_epoch: int
    train_loss: list
    val_loss: list
    epoch_seconds: float


@dataclass
class MetricsReport:
    folds: list = field(default_factory=list)

    @property
    def accuracies(self):
        return np.array([f.accuracy for f in self.folds])

    @property
    def mean_accuracy(self):
        return float(self.accuracies.mean())

    @property
    def std_accuracy(self):
        return float(self.accuracies.std())

    @property
    def mean_auc(self):
        aucs = [f.auc for f in self.folds if f.auc is not None]
        return float(np.mean(aucs)) if aucs else None

    def to_dict(self):
        return {
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "mean_auc": self.mean_auc,
            "folds": [asdict(f) for f in self.folds],
        }


def accuracy(logits, labels):
    logits = np.asarray(logits)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def roc_auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank-sum statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def stratified_folds(labels, k, rng):
    """Assign each item to one of k folds, balancing classes round-robin."""
    labels = np.asarray(labels)
    fold_of = np.empty(labels.size, dtype=np.int64)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        fold_of[idx] = (offset + np.arange(idx.size)) % k
        offset += idx.size
    return [np.flatnonzero(fold_of == f) for f in range(k)]


def stratified_split(indices, labels, fraction, rng):
    """Split ``indices`` into (rest, held_out) with about ``fraction`` held out per class."""
    indices = np.asarray(indices)
    labels = np.asarray(labels)[indices]
    held = []
    for c in np.unique(labels):
        idx = indices[labels == c].copy()
        rng.shuffle(idx)
        held.append(idx[: max(1, int(round(fraction * idx.size)))])
    held = np.sort(np.concatenate(held))
    rest = np.setdiff1d(indices, held)
    return rest, held


class EarlyStopper:
    """Tracks the best validation loss; stops after ``patience`` epochs without improvement."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad = 0

    def update(self, loss, epoch):
        """Record a validation loss; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad = loss, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def _graph_logits(model, graphs, train=False, rng=None):
    return ops.concat([model.forward_graph(g, train, rng) for g in graphs], axis=0)


def evaluate_graphs(model, graphs, labels):
    """(loss, logits) on a list of graphs without recording a tape."""
    with no_grad():
        logits = _graph_logits(model, graphs)
        loss = ops.cross_entropy(logits, labels).item()
    return loss, logits.data


def fit_graphs(model, graphs, labels, val_graphs, val_labels, tcfg, rng):
    """Train on graphs with early stopping; restores the best-validation weights."""
    params = model.parameters()
    stopper = EarlyStopper(tcfg.early_stop_patience)
    best = model.state_arrays()
    train_curve, val_curve = [], []
    labels = np.asarray(labels)
    t0 = time.perf_counter()
    epoch = 0
    for epoch in range(tcfg.max_epochs):
        order = rng.permutation(len(graphs))
        total = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            with Tape() as tape:
                logits = _graph_logits(model, [graphs[i] for i in idx], True, rng)
                loss = ops.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.item()):
                model.load_arrays(best)
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            tape.backward(loss)
            adam_step(params, tcfg.lr, weight_decay=tcfg.weight_decay)
            for p in params:
                p.grad = None
            total += loss.item() * idx.size
        train_curve.append(total / len(graphs))
        val_loss, _ = evaluate_graphs(model, val_graphs, val_labels)
        val_curve.append(val_loss)
        improved = val_loss < stopper.best
        stop = stopper.update(val_loss, epoch)
        if improved:
            best = model.state_arrays()
        if stop:
            break
    model.load_arrays(best)
    seconds = (time.perf_counter() - t0) / (epoch + 1)
    return train_curve, val_curve, stopper.best_epoch, epoch + 1, seconds


def cross_validate(dataset, mcfg, tcfg, fold_callback=None):
    """Stratified k-fold CV on a graph-classification dataset."""
    if dataset.task != "graph-classification" or mcfg.task != "graph":
        raise ConfigError("cross_validate needs a graph-classification dataset and task='graph'")
    labels = dataset.labels()
    rng = np.random.default_rng(tcfg.seed)
    folds = stratified_folds(labels, tcfg.folds, rng)
    report = MetricsReport()
    for f, test_idx in enumerate(folds):
        fold_rng = np.random.default_rng([tcfg.seed, f])
        train_idx = np.setdiff1d(np.arange(len(dataset)), test_idx)
        train_idx, val_idx = stratified_split(train_idx, labels, tcfg.val_fraction, fold_rng)
        model = CoCN(mcfg, seed=tcfg.seed * 1000 + f)
        graphs = dataset.graphs
        tr, va, best_epoch, epochs, secs = fit_graphs(
            model,
            [graphs[i] for i in train_idx], labels[train_idx],
            [graphs[i] for i in val_idx], labels[val_idx],
            tcfg, fold_rng,
        )
        _, logits = evaluate_graphs(model, [graphs[i] for i in test_idx], labels[test_idx])
        acc = accuracy(logits, labels[test_idx])
        auc = None
        if mcfg.num_classes == 2 and len(np.unique(labels[test_idx])) == 2:
            auc = roc_auc(logits[:, 1] - logits[:, 0], labels[test_idx])
        result = FoldResult(f, acc, auc, epochs, best_epoch, tr, va, secs)
        report.folds.append(result)
        log.info("fold %d: accuracy %.4f (best epoch %d of %d)", f, acc, best_epoch, epochs)
        if fold_callback is not None:
            fold_callback(result, model)
    return report


def train_node_task(g, mcfg, tcfg, train_idx, val_idx, test_idx):
    """Single-graph node classification with early stopping on the validation nodes."""
    if mcfg.task != "node":
        raise ConfigError("train_node_task needs task='node'")
    labels = np.asarray(g.node_labels)
    rng = np.random.default_rng(tcfg.seed)
    model = CoCN(mcfg, seed=tcfg.seed)
    params = model.parameters()
    stopper = EarlyStopper(tcfg.early_stop_patience)
    best = model.state_arrays()
    train_curve, val_curve = [], []
    t0 = time.perf_counter()
    epoch = 0
    for epoch in range(tcfg.max_epochs):
        with Tape() as tape:
            logits = model.forward_node(g, True, rng)
            loss = ops.cross_entropy(logits[train_idx], labels[train_idx])
        if not np.isfinite(loss.item()):
            model.load_arrays(best)
            raise DivergenceError(f"non-finite training loss at epoch {epoch}")
        tape.backward(loss)
        adam_step(params, tcfg.lr, weight_decay=tcfg.weight_decay)
        for p in params:
            p.grad = None
        train_curve.append(loss.item())
        with no_grad():
            out = model.forward_node(g).data
        val = float(ops.cross_entropy(out[val_idx], labels[val_idx]).item())
        val_curve.append(val)
        improved = val < stopper.best
        stop = stopper.update(val, epoch)
        if improved:
            best = model.state_arrays()
        if stop:
            break
    model.load_arrays(best)
    with no_grad():
        out = model.forward_node(g).data
    secs = (time.perf_counter() - t0) / (epoch + 1)
    result = FoldResult(0, accuracy(out[test_idx], labels[test_idx]), None, epoch + 1,
                        stopper.best_epoch, train_curve, val_curve, secs)
    return MetricsReport([result]), model
