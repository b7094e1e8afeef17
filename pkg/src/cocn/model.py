"""Assembled networks: graph-level, node-level, sparse and segment variants."""

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from .autodiff import DTYPE, Parameter, Tensor, as_tensor, fan_in_uniform, ops
from .convolution import (
    DiagConvKernel,
    EdgeSet,
    LayerConfig,
    LevelState,
    circular_pad,
    compressed_conv_layer,
    padded_length,
    transposed_conv_layer,
)
from .graph import degree_onehot_features, normalized_adjacency, shortest_path_distances
from .permutation import (
    PositionRegressor,
    absolute_position,
    permute,
    permute_edges,
    regress_position_explicit,
    regress_position_implicit,
    relaxed_permutation,
    sparse_permutation,
    unpermute,
)

VARIANTS = ("vanilla", "expanded", "sparse", "segment")
MAGIC = b"COCN1"


class ConfigError(ValueError):
    """Inconsistent model configuration or config/data mismatch."""


@dataclass
class ModelConfig:
    variant: str = "vanilla"
    task: str = "graph"
    heads: int = 1
    L1: int = 1
    L2: int = 1
    kernel_sizes: list = field(default_factory=lambda: [3])
    hidden: int = 32
    tau: float = 1.0
    smoothness_t: int = 1
    position_mode: str = "explicit"
    position_hidden: list = field(default_factory=lambda: [16])
    segment_b: int = 8
    segment_batch_nb: int = 1000
    residual: bool = False
    inception_ks: list | None = None
    final_uco: bool | None = None
    dropout: float = 0.0
    in_dim: int = 0
    num_classes: int = 2
    max_degree: int | None = None
    implicit_scale: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task not in ("graph", "node"):
            raise ConfigError(f"task must be 'graph' or 'node', got {self.task!r}")
        if self.position_mode not in ("explicit", "implicit"):
            raise ConfigError(f"position_mode must be explicit or implicit, got {self.position_mode!r}")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.L1 < 0 or self.L2 < 0 or self.L1 + self.L2 < 1:
            raise ConfigError("at least one compressed convolution layer is required (L1 + L2 >= 1)")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.smoothness_t < 0:
            raise ConfigError("smoothness_t must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        ks = self.layer_kernel_sizes()
        if any(k < 1 for k in ks):
            raise ConfigError("kernel sizes must be >= 1")
        if self.inception_ks is not None and len(self.inception_ks) == 0:
            raise ConfigError("inception_ks must be non-empty when given")
        if self.variant == "vanilla" and (self.residual or self.inception_ks):
            raise ConfigError("the vanilla variant has neither residual nor inception layers")
        if self.variant == "segment" and self.segment_b < max(ks + list(self.inception_ks or [])):
            raise ConfigError(
                f"segment_b={self.segment_b} must be at least the largest kernel size {max(ks)}"
            )
        if self.segment_batch_nb < 1:
            raise ConfigError("segment_batch_nb must be >= 1")

    @property
    def use_final_uco(self):
        if self.final_uco is None:
            return self.task == "graph" or self.variant == "segment"
        return bool(self.final_uco)

    @property
    def num_down(self):
        return self.L1 + self.L2 + int(self.use_final_uco)

    def layer_kernel_sizes(self):
        ks = list(self.kernel_sizes) if isinstance(self.kernel_sizes, (list, tuple)) else [self.kernel_sizes]
        n = self.L1 + self.L2 + int(self.use_final_uco)
        if len(ks) == 1:
            ks = ks * n
        if len(ks) != n:
            raise ConfigError(f"kernel_sizes has {len(ks)} entries for {n} layers")
        return [int(k) for k in ks]

    def layer_configs(self):
        out = []
        for i, k in enumerate(self.layer_kernel_sizes()):
            pooling = self.L1 <= i < self.L1 + self.L2
            inc = None
            if self.inception_ks and not pooling:
                inc = sorted(set(self.inception_ks))
            out.append(LayerConfig(k, k if pooling else 1, self.hidden, self.residual, inc))
        return out

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SegmentBatch:
    anchor_nodes: np.ndarray
    nodes: np.ndarray  # (n_b, b) original node ids per segment
    X_b: Tensor
    A_b: np.ndarray
    r_A_b: Tensor


class CoCN:
    """Parameters plus forward passes for one :class:`ModelConfig`."""

    def __init__(self, cfg, seed=0):
        cfg.validate()
        if cfg.in_dim < 1:
            raise ConfigError("in_dim must be set to the node feature dimension")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h = cfg.hidden
        self.w_in = fan_in_uniform(rng, (cfg.in_dim, h), cfg.in_dim, "in.w")
        self.b_in = fan_in_uniform(rng, (h,), cfg.in_dim, "in.b")
        self.regressor = None
        if cfg.position_mode == "explicit":
            self.regressor = PositionRegressor(
                cfg.in_dim, cfg.position_hidden, cfg.heads, cfg.smoothness_t, rng=rng
            )
        self.layer_cfgs = cfg.layer_configs()
        self.kernels = []
        for i, lc in enumerate(self.layer_cfgs):
            if lc.inception_ks:
                self.kernels.append(
                    [DiagConvKernel.init(rng, h, 1, h, k, f"down{i}.k{k}") for k in lc.ks]
                )
            else:
                self.kernels.append(DiagConvKernel.init(rng, h, 1, h, lc.k, f"down{i}"))
        self.up_weights = []
        if cfg.task == "node" and cfg.variant != "segment":
            ups = [(lc.k, lc.s) for lc in reversed(self.layer_cfgs)] + [(1, 1)]
            self.up_shapes = ups
            for i, (k, _s) in enumerate(ups):
                self.up_weights.append(fan_in_uniform(rng, (k, h, h), k * h, f"up{i}.w"))
        self.w_out = fan_in_uniform(rng, (cfg.heads * h, cfg.num_classes), cfg.heads * h, "out.w")
        self.b_out = fan_in_uniform(rng, (cfg.num_classes,), cfg.heads * h, "out.b")

    # parameters ---------------------------------------------------------
    def parameters(self):
        ps = [self.w_in, self.b_in]
        if self.regressor is not None:
            ps += self.regressor.parameters()
        for kern in self.kernels:
            for kk in (kern if isinstance(kern, list) else [kern]):
                ps += kk.parameters()
        ps += self.up_weights
        ps += [self.w_out, self.b_out]
        return ps

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def conv_parameter_count(self):
        """Closed-form count of the down-path kernels."""
        h = self.cfg.hidden
        return sum(DiagConvKernel.count(h, 1, h, k) for lc in self.layer_cfgs for k in lc.ks)

    # inputs -------------------------------------------------------------
    def node_features(self, g):
        cfg = self.cfg
        if g.features is not None:
            X = g.features
        elif cfg.position_mode == "implicit":
            key = ("degree", cfg.max_degree)
            if key not in g._cache:
                md = cfg.max_degree if cfg.max_degree is not None else cfg.in_dim - 1
                g._cache[key] = degree_onehot_features(g, md)
            X = g._cache[key]
        else:
            raise ConfigError("graph has no node features and position_mode is explicit")
        if X.shape[1] != cfg.in_dim:
            raise ConfigError(f"graph features have {X.shape[1]} columns, model expects {cfg.in_dim}")
        return X

    def input_module(self, X):
        return ops.relu(ops.layer_norm(as_tensor(X) @ self.w_in + self.b_in))

    def positions(self, g, X):
        """Approximate positions, shape (n, heads)."""
        cfg = self.cfg
        if cfg.position_mode == "implicit":
            key = ("implicit", cfg.heads, cfg.implicit_scale)
            if key not in g._cache:
                g._cache[key] = regress_position_implicit(
                    shortest_path_distances(g, cfg.implicit_scale), cfg.heads
                )
            return Tensor(g._cache[key])
        return regress_position_explicit(X, normalized_adjacency(g), self.regressor)

    # down / up blocks -----------------------------------------------------
    def down_block(self, state):
        """Run all down layers; returns final state and per-layer (n_in, N, k, s)."""
        trace = []
        for lc, kern in zip(self.layer_cfgs, self.kernels):
            n_in = state.n
            N = max(padded_length(n_in, k, lc.s) for k in lc.ks)
            state = circular_pad(state, N)
            trace.append((n_in, N, max(lc.ks), lc.s))
            state = compressed_conv_layer(state, lc, kern)
        return state, trace

    def up_block(self, H, trace):
        for (n_in, N, k, s), w in zip(reversed(trace), self.up_weights):
            H = transposed_conv_layer(H, k, s, w, N)
            if N != n_in:
                H = H[..., :n_in, :]
        return transposed_conv_layer(H, 1, 1, self.up_weights[-1], H.shape[-2])

    def classify(self, z, train=False, rng=None):
        if train and self.cfg.dropout > 0:
            rng = rng or np.random.default_rng()
            keep = (rng.random(z.shape) >= self.cfg.dropout) / (1.0 - self.cfg.dropout)
            z = z * keep
        return z @ self.w_out + self.b_out

    # permutation + conv per variant ----------------------------------------
    def _permuted_state(self, g, H0, r_a):
        """Per-head permuted inputs as a list of LevelStates (sparse) or one batched state."""
        A = g.adjacency()
        n = g.n
        if self.cfg.variant == "sparse":
            states, perms = [], []
            for h in range(self.cfg.heads):
                perm = sparse_permutation(r_a[:, h])
                X_hat = H0[perm.order] * perm.grad_weight[perm.order].reshape(n, 1)
                rows, cols, vals = permute_edges(perm, A)
                E = EdgeSet(n, rows, cols, vals.reshape(1, rows.size))
                states.append(LevelState(X_hat, E))
                perms.append(perm)
            return states, perms
        perm = relaxed_permutation(absolute_position(r_a, "dense"), self.cfg.tau)
        X_hat, A_hat = permute(perm, H0, A)
        E = A_hat.reshape((self.cfg.heads, 1, n, n))
        return [LevelState(X_hat, E)], [perm]

    def embed(self, g):
        """Pooled graph representation (heads * hidden,) before the classifier."""
        if self.cfg.variant == "segment":
            return self._segment_graph_embedding(g)
        X = self.node_features(g)
        H0 = self.input_module(X)
        r_a = self.positions(g, X)
        states, _ = self._permuted_state(g, H0, r_a)
        pooled = []
        for st in states:
            top, _ = self.down_block(st)
            pooled.append(ops.max(top.H, axis=-2))  # (heads, hidden) or (hidden,)
        z = pooled[0] if len(pooled) == 1 else ops.stack(pooled, axis=0)
        return z.reshape((1, self.cfg.heads * self.cfg.hidden))

    def forward_graph(self, g, train=False, rng=None):
        """Class logits of shape (1, num_classes)."""
        if self.cfg.task != "graph":
            raise ConfigError("forward_graph needs task='graph'")
        return self.classify(self.embed(g), train, rng)

    def forward_node(self, g, train=False, rng=None):
        """Per-node logits of shape (n, num_classes)."""
        if self.cfg.task != "node":
            raise ConfigError("forward_node needs task='node'")
        if self.cfg.variant == "segment":
            return self.segment_node_logits(g, train=train, rng=rng)
        X = self.node_features(g)
        n = g.n
        H0 = self.input_module(X)
        r_a = self.positions(g, X)
        states, perms = self._permuted_state(g, H0, r_a)
        outs = []
        for st, perm in zip(states, perms):
            top, trace = self.down_block(st)
            H = self.up_block(top.H, trace)
            outs.append(unpermute(perm, H))  # (heads, n, hidden) or (n, hidden)
        if self.cfg.variant == "sparse":
            Z = ops.concat(outs, axis=1)
        else:
            Z = ops.transpose(outs[0], (1, 0, 2)).reshape((n, self.cfg.heads * self.cfg.hidden))
        return self.classify(Z, train, rng)

    def forward(self, g, train=False, rng=None):
        if self.cfg.task == "graph":
            return self.forward_graph(g, train, rng)
        return self.forward_node(g, train, rng)

    # segment variant ----------------------------------------------------
    def segment_order(self, g):
        """Global node order from head-0 positions; no gradient flows through it."""
        X = self.node_features(g)
        r_a = self.positions(g, X)
        return np.argsort(r_a.data[:, 0], kind="stable")

    def segment_batches(self, g, H0=None, r_a=None, order=None):
        """Yield SegmentBatch objects covering every node once as an anchor."""
        cfg = self.cfg
        n, b = g.n, cfg.segment_b
        if b > n:
            raise ConfigError(f"segment_b={b} exceeds the node count {n}")
        if H0 is None or r_a is None:
            X = self.node_features(g)
            H0 = self.input_module(X) if H0 is None else H0
            r_a = self.positions(g, X) if r_a is None else r_a
        if order is None:
            order = np.argsort(r_a.data[:, 0], kind="stable")
        A = g.adjacency()
        for start in range(0, n, cfg.segment_batch_nb):
            p = np.arange(start, min(start + cfg.segment_batch_nb, n))
            nodes = order[(p[:, None] + np.arange(b)[None, :]) % n]
            flat = nodes.reshape(-1)
            A_b = induced_blocks(A, nodes)
            yield SegmentBatch(
                nodes[:, 0], nodes,
                H0[flat].reshape((p.size, b, cfg.hidden)),
                A_b,
                r_a[flat].reshape((p.size, b, cfg.heads)),
            )

    def segment_forward(self, batch):
        """Pooled representation per segment, shape (n_b, heads * hidden)."""
        cfg = self.cfg
        nb, b = batch.nodes.shape
        r = absolute_position(ops.transpose(batch.r_A_b, (1, 0, 2)), "dense")  # (b, nb, heads)
        perm = relaxed_permutation(r, cfg.tau)  # (nb, heads, b, b)
        P = perm.p_hat
        X_hat = P @ batch.X_b.reshape((nb, 1, b, cfg.hidden))
        A_hat = P @ (Tensor(batch.A_b.reshape(nb, 1, b, b)) @ ops.transpose(P, (0, 1, 3, 2)))
        state = LevelState(X_hat, A_hat.reshape((nb, cfg.heads, 1, b, b)))
        top, _ = self.down_block(state)
        return ops.max(top.H, axis=-2).reshape((nb, cfg.heads * cfg.hidden))

    def segment_node_logits(self, g, nodes=None, train=False, rng=None):
        """Logits for every node (ordered by node id) or for the given anchors."""
        X = self.node_features(g)
        H0 = self.input_module(X)
        r_a = self.positions(g, X)
        outs, anchors = [], []
        for batch in self.segment_batches(g, H0, r_a):
            if nodes is not None:
                keep = np.isin(batch.anchor_nodes, nodes)
                if not keep.any():
                    continue
            outs.append(self.classify(self.segment_forward(batch), train, rng))
            anchors.append(batch.anchor_nodes)
        anchors = np.concatenate(anchors)
        logits = ops.concat(outs, axis=0)
        order = np.argsort(anchors)
        if nodes is not None:
            pos = np.searchsorted(anchors[order], nodes)
            return logits[order[pos]]
        return logits[order]

    def _segment_graph_embedding(self, g):
        X = self.node_features(g)
        H0 = self.input_module(X)
        r_a = self.positions(g, X)
        pooled = [self.segment_forward(batch) for batch in self.segment_batches(g, H0, r_a)]
        z = pooled[0] if len(pooled) == 1 else ops.concat(pooled, axis=0)
        return ops.max(z, axis=0).reshape((1, self.cfg.heads * self.cfg.hidden))

    # persistence ----------------------------------------------------------
    def save(self, path):
        blob = json.dumps(self.cfg.to_dict(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for p in self.parameters():
                fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(len(MAGIC)) != MAGIC:
                raise ValueError(f"{path} is not a model checkpoint")
            (size,) = struct.unpack("<I", fh.read(4))
            cfg = ModelConfig.from_dict(json.loads(fh.read(size)))
            model = cls(cfg)
            for p in model.parameters():
                raw = fh.read(p.size * 8)
                if len(raw) != p.size * 8:
                    raise ValueError(f"{path} is truncated")
                p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
            if fh.read(1):
                raise ValueError(f"{path} has trailing bytes")
        return model

    def state_arrays(self):
        return [p.data.copy() for p in self.parameters()]

    def load_arrays(self, arrays):
        for p, a in zip(self.parameters(), arrays):
            p.data[...] = a


def induced_blocks(A, nodes):
    """Dense induced adjacency blocks A[nodes[i]][:, nodes[i]], shape (n_b, b, b)."""
    A = sp.csr_matrix(A)
    nb, b = nodes.shape
    out = np.empty((nb, b, b), dtype=DTYPE)
    for u in range(b):
        for v in range(b):
            out[:, u, v] = np.asarray(A[nodes[:, u], nodes[:, v]]).ravel()
    return out


def init_params(cfg, seed=0):
    """Fresh model for ``cfg``; identical seeds give identical parameters."""
    return CoCN(cfg, seed)


def forward_graph(g, cfg, params):
    return params.forward_graph(g)


def forward_node(g, cfg, params):
    return params.forward_node(g)
