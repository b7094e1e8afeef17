"""Graph records, loaders, and precomputed graph operators."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path

__all__ = [
    "Graph", "Dataset", "DistanceMatrix", "GraphFormatError", "LoadError",
    "IntegrityError", "CapacityError", "load_edge_list", "write_edge_list",
    "load_tu_dataset", "normalized_adjacency", "shortest_path_distances",
    "degree_onehot_features", "ring_graph", "grid_graph", "erdos_renyi",
    "relabel",
]

TASKS = ("graph-classification", "node-classification", "isomorphism-pairs")


class GraphFormatError(ValueError):
    """Malformed graph file or out-of-range node index."""


class LoadError(FileNotFoundError):
    """A mandatory dataset file is missing."""


class IntegrityError(ValueError):
    """Dataset files disagree with each other."""


class CapacityError(ValueError):
    """A value does not fit the requested encoding."""


def _canonical_edges(edges, n, allow_self_loops=False):
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        bad = e[(e < 0).any(axis=1) | (e >= n).any(axis=1)][0]
        raise GraphFormatError(f"edge ({bad[0]}, {bad[1]}) out of range for n={n}")
    e = np.sort(e, axis=1)
    if not allow_self_loops:
        e = e[e[:, 0] != e[:, 1]]
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with optional features and labels.

    Edges are stored once per undirected pair as rows ``(i, j)`` with
    ``i <= j``, sorted and deduplicated at construction.
    """

    n: int
    edges: np.ndarray
    features: np.ndarray | None = None
    graph_label: int | None = None
    node_labels: np.ndarray | None = None
    allow_self_loops: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError(f"graph needs at least one node, got n={self.n}")
        object.__setattr__(self, "n", int(self.n))
        edges = _canonical_edges(self.edges, self.n, self.allow_self_loops)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats[:, None]
            if feats.shape[0] != self.n:
                raise ValueError(f"features have {feats.shape[0]} rows for n={self.n}")
            feats.setflags(write=False)
            object.__setattr__(self, "features", feats)
        if self.node_labels is not None:
            labels = np.array(self.node_labels, dtype=np.int64)
            if labels.shape != (self.n,):
                raise ValueError(f"node_labels shape {labels.shape} does not match n={self.n}")
            labels.setflags(write=False)
            object.__setattr__(self, "node_labels", labels)

    @property
    def num_edges(self):
        return len(self.edges)

    def adjacency(self):
        """Symmetric 0/1 adjacency as a CSR matrix (cached)."""
        if "adj" not in self._cache:
            i, j = self.edges[:, 0], self.edges[:, 1]
            off = i != j
            rows = np.concatenate([i, j[off]])
            cols = np.concatenate([j, i[off]])
            a = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(self.n, self.n))
            self._cache["adj"] = a
        return self._cache["adj"]

    def dense_adjacency(self):
        return self.adjacency().toarray()

    def degrees(self):
        return np.asarray(self.adjacency().sum(axis=1)).ravel().astype(np.int64)

    def with_features(self, features):
        return Graph(self.n, self.edges, features, self.graph_label, self.node_labels,
                     self.allow_self_loops)


@dataclass
class Dataset:
    graphs: list
    task: str = "graph-classification"
    num_classes: int = 2
    name: str = ""

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("dataset is empty")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        for g in self.graphs:
            labels = [] if g.graph_label is None else [g.graph_label]
            if g.node_labels is not None and self.task == "node-classification":
                labels = list(g.node_labels)
            for y in labels:
                if not 0 <= y < self.num_classes:
                    raise ValueError(f"label {y} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def labels(self):
        return np.array([g.graph_label for g in self.graphs], dtype=np.int64)

    @property
    def feature_dim(self):
        f = self.graphs[0].features
        return 0 if f is None else f.shape[1]


@dataclass(frozen=True)
class DistanceMatrix:
    d_scaled: np.ndarray
    scale: float


def load_edge_list(path):
    """Read whitespace-separated ``i j`` pairs; an ``n=<count>`` header fixes n."""
    path = Path(path)
    n = None
    pairs = []
    with path.open() as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("n="):
                if n is not None or pairs:
                    raise GraphFormatError(f"{path}:{lineno}: header must come first")
                try:
                    n = int(line[2:])
                except ValueError:
                    raise GraphFormatError(f"{path}:{lineno}: bad header {line!r}") from None
                continue
            parts = line.split()
            try:
                if len(parts) != 2:
                    raise ValueError
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: expected 'i j', got {line!r}") from None
            if i < 0 or j < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative node index")
            if n is not None and max(i, j) >= n:
                raise GraphFormatError(f"{path}:{lineno}: node index {max(i, j)} >= n={n}")
            pairs.append((i, j))
    if n is None:
        if not pairs:
            raise GraphFormatError(f"{path}: no edges and no header")
        n = max(max(p) for p in pairs) + 1
    return Graph(n, pairs)


def write_edge_list(g, path):
    with Path(path).open("w") as fh:
        fh.write(f"n={g.n}\n")
        for i, j in g.edges:
            fh.write(f"{i} {j}\n")


def _read_ints(path, required=True):
    if not path.exists():
        if required:
            raise LoadError(f"missing dataset file: {path.name}")
        return None
    text = path.read_text().replace(",", " ")
    return np.array(text.split(), dtype=np.int64)


def load_tu_dataset(directory, name=None):
    """Load a dataset in the public TU text layout (1-based, comma separated)."""
    directory = Path(directory)
    if name is None:
        hits = sorted(directory.glob("*_graph_indicator.txt"))
        if not hits:
            raise LoadError(f"missing dataset file: <name>_graph_indicator.txt in {directory}")
        name = hits[0].name[: -len("_graph_indicator.txt")]
    indicator = _read_ints(directory / f"{name}_graph_indicator.txt")
    edges = _read_ints(directory / f"{name}_A.txt")
    graph_labels = _read_ints(directory / f"{name}_graph_labels.txt")
    node_labels = _read_ints(directory / f"{name}_node_labels.txt", required=False)

    if edges.size % 2:
        raise IntegrityError(f"{name}_A.txt has an odd number of entries")
    edges = edges.reshape(-1, 2) - 1
    num_nodes = indicator.size
    graph_ids = np.unique(indicator)
    if graph_ids.size != graph_labels.size:
        raise IntegrityError(
            f"{graph_ids.size} graphs in indicator but {graph_labels.size} graph labels"
        )
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise IntegrityError(f"edge endpoint outside the {num_nodes} indicated nodes")
    if node_labels is not None and node_labels.size != num_nodes:
        raise IntegrityError(f"{node_labels.size} node labels for {num_nodes} nodes")
    owner = indicator[edges[:, 0]] if edges.size else np.zeros(0, dtype=np.int64)
    if edges.size and np.any(owner != indicator[edges[:, 1]]):
        raise IntegrityError("edge joins nodes from different graphs")

    classes = np.unique(graph_labels)
    label_map = {c: i for i, c in enumerate(classes)}
    if node_labels is not None:
        node_values = np.unique(node_labels)
        onehot = (node_labels[:, None] == node_values[None, :]).astype(np.float64)

    order = np.argsort(indicator, kind="stable")
    starts = np.searchsorted(indicator[order], graph_ids)
    ends = np.searchsorted(indicator[order], graph_ids, side="right")
    edge_order = np.argsort(owner, kind="stable")
    sorted_owner = owner[edge_order]
    graphs = []
    for gi, gid in enumerate(graph_ids):
        nodes = order[starts[gi]:ends[gi]]
        local = np.full(num_nodes, -1, dtype=np.int64)
        local[nodes] = np.arange(nodes.size)
        lo, hi = np.searchsorted(sorted_owner, [gid, gid + 1])
        ge = local[edges[edge_order[lo:hi]]]
        feats = onehot[nodes] if node_labels is not None else None
        graphs.append(
            Graph(nodes.size, ge, feats, label_map[graph_labels[gi]])
        )
    return Dataset(graphs, "graph-classification", len(classes), name)


def normalized_adjacency(g):
    """D^-1/2 A D^-1/2 as CSR; rows of isolated nodes stay zero."""
    if "norm_adj" not in g._cache:
        a = g.adjacency()
        deg = np.asarray(a.sum(axis=1)).ravel()
        inv = np.zeros_like(deg)
        nz = deg > 0
        inv[nz] = 1.0 / np.sqrt(deg[nz])
        d = sp.diags(inv)
        g._cache["norm_adj"] = (d @ a @ d).tocsr()
    return g._cache["norm_adj"]


def shortest_path_distances(g, scale=None):
    """Hop distances times ``scale`` (default 1/n); unreachable pairs get scale*n."""
    scale = 1.0 / g.n if scale is None else float(scale)
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    hops = shortest_path(g.adjacency(), method="D", unweighted=True, directed=False)
    hops[np.isinf(hops)] = g.n
    return DistanceMatrix(hops * scale, scale)


def degree_onehot_features(g, max_degree):
    deg = g.degrees()
    if deg.size and deg.max() > max_degree:
        raise CapacityError(f"observed degree {deg.max()} exceeds max_degree={max_degree}")
    out = np.zeros((g.n, max_degree + 1))
    out[np.arange(g.n), deg] = 1.0
    return out


def relabel(g, perm):
    """Copy of ``g`` in which old node ``i`` becomes node ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.argsort(perm)
    feats = None if g.features is None else g.features[inv]
    labels = None if g.node_labels is None else g.node_labels[inv]
    return Graph(g.n, perm[g.edges], feats, g.graph_label, labels, g.allow_self_loops)


def ring_graph(n):
    """Cycle on n nodes with unit-circle coordinates as features."""
    idx = np.arange(n)
    theta = 2 * np.pi * idx / n
    coords = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return Graph(n, np.stack([idx, (idx + 1) % n], axis=1), coords)


def grid_graph(rows, cols):
    """rows x cols lattice with integer (row, col) coordinates as features."""
    idx = np.arange(rows * cols).reshape(rows, cols)
    right = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    down = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    r, c = np.divmod(np.arange(rows * cols), cols)
    coords = np.stack([r, c], axis=1).astype(np.float64)
    return Graph(rows * cols, np.concatenate([right, down]), coords)


def erdos_renyi(n, avg_degree, rng):
    """G(n, p) with p chosen for the requested expected degree.

    Sampling uses the edge count then distinct pairs, so memory stays linear
    in the number of edges.
    """
    p = min(avg_degree / max(n - 1, 1), 1.0)
    total = n * (n - 1) // 2
    m = rng.binomial(total, p)
    chosen = set()
    while len(chosen) < m:
        need = m - len(chosen)
        i = rng.integers(0, n, size=2 * need)
        j = rng.integers(0, n, size=2 * need)
        keep = i != j
        lo, hi = np.minimum(i[keep], j[keep]), np.maximum(i[keep], j[keep])
        for key in (lo * n + hi)[:need]:
            chosen.add(int(key))
    keys = np.fromiter(chosen, dtype=np.int64, count=len(chosen))
    keys = keys[:m]
    return Graph(n, np.stack([keys // n, keys % n], axis=1))
