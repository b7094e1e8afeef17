"""Diagonal convolution and the compressed convolution layers built on it.

Shapes: structure features ``E`` are (..., ce, n, n) and node-set features
``H`` are (..., n, c). Leading axes (heads, segment batches) broadcast
through every operation with shared kernels.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError, Tensor, as_tensor, fan_in_uniform, ops


class SizeError(DimensionError):
    """A sequence is too short for the requested window."""


def out_length(n, k, s):
    return (n - k) // s + 1


def padded_length(n, k, s):
    """Smallest N >= max(n, k) with (N - k) divisible by s."""
    N = max(n, k)
    return N + (-(N - k)) % s


@dataclass
class DiagConvKernel:
    w: Tensor
    v: Tensor
    bias: Tensor

    @property
    def k(self):
        return self.w.shape[-1]

    @property
    def out_channels(self):
        return self.w.shape[0]

    def parameters(self):
        return [self.w, self.v, self.bias]

    @staticmethod
    def count(out, in_e, in_n, k):
        return out * (in_e * k * k + in_n * k + 1)

    @classmethod
    def init(cls, rng, out, in_e, in_n, k, name="conv"):
        fan_in = in_e * k * k + in_n * k
        return cls(
            fan_in_uniform(rng, (out, in_e, k, k), fan_in, name=f"{name}.w"),
            fan_in_uniform(rng, (out, in_n, k), fan_in, name=f"{name}.v"),
            fan_in_uniform(rng, (out,), fan_in, name=f"{name}.bias"),
        )


@dataclass
class LayerConfig:
    k: int
    s: int = 1
    out_channels: int = 32
    residual: bool = False
    inception_ks: list | None = None

    def __post_init__(self):
        if self.k < 1 or self.s < 1:
            raise ValueError(f"kernel size and step must be >= 1, got k={self.k}, s={self.s}")
        if self.inception_ks is not None and len(self.inception_ks) == 0:
            raise ValueError("inception_ks must be non-empty when given")

    @property
    def ks(self):
        return list(self.inception_ks) if self.inception_ks else [self.k]


@dataclass
class LevelState:
    H: Tensor
    E: object  # dense Tensor (..., ce, n, n) or EdgeSet

    @property
    def n(self):
        return self.H.shape[-2]


def _check_window(n, k):
    if n < k:
        raise SizeError(f"sequence length {n} is shorter than kernel size {k}; pad the input first")


def _window_rows(n, k, s):
    m = out_length(n, k, s)
    return (s * np.arange(m))[:, None] + np.arange(k)[None, :]


def diagonal_conv(E, H, kernel, s=1):
    """S_j = sum_pq w_pq E[i+p, i+q] + sum_pt v_pt H[i+p, t] + bias, with i = s*j."""
    H = as_tensor(H)
    n, c = H.shape[-2], H.shape[-1]
    k = kernel.k
    if kernel.v.shape[1] != c:
        raise DimensionError(f"node kernel {kernel.v.shape} does not match features {H.shape}")
    _check_window(n, k)
    rows = _window_rows(n, k, s)
    m = rows.shape[0]
    out = kernel.out_channels
    # node part: (..., m, k, c) -> (..., m, c*k)
    hw = H[..., rows, :]
    hw = ops.transpose(hw, tuple(range(hw.ndim - 3)) + (hw.ndim - 3, hw.ndim - 1, hw.ndim - 2))
    y = hw.reshape(H.shape[:-2] + (m, c * k)) @ kernel.v.reshape(out, c * k).T
    if isinstance(E, EdgeSet):
        y = y + _edge_part_sparse(E, kernel, s, m)
    else:
        E = as_tensor(E)
        ce = E.shape[-3]
        if E.shape[-1] != n or E.shape[-2] != n or kernel.w.shape[1] != ce:
            raise DimensionError(
                f"structure features {E.shape} do not match node features {H.shape} "
                f"and kernel {kernel.w.shape}"
            )
        ew = E[..., rows[:, :, None], rows[:, None, :]]  # (..., ce, m, k, k)
        nd = ew.ndim
        perm = tuple(range(nd - 4)) + (nd - 3, nd - 4, nd - 2, nd - 1)
        ew = ops.transpose(ew, perm).reshape(E.shape[:-3] + (m, ce * k * k))
        y = y + ew @ kernel.w.reshape(out, ce * k * k).T
    return y + kernel.bias


def edge_update_tri(E, k):
    """Zero the band |i - j| < k (per channel)."""
    if isinstance(E, EdgeSet):
        return E.filter(np.abs(E.rows - E.cols) >= k)
    E = as_tensor(E)
    n = E.shape[-1]
    i = np.arange(n)
    return ops.where_const(np.abs(i[:, None] - i[None, :]) >= k, E)


def edge_update_maxpool(E, k, s):
    """k x k max pooling with step s (per channel)."""
    if isinstance(E, EdgeSet):
        return E.max_pool(k, s)
    return ops.max_pool_2d(E, k, s)


def _update_edges(E, k, s):
    if s == 1:
        # remove consumed diagonal blocks, then aggregate onto the n-k+1 node sets
        return edge_update_maxpool(edge_update_tri(E, k), k, 1)
    return edge_update_maxpool(E, k, s)


def compressed_conv_layer(state, cfg, kernel):
    """One compressed convolution layer (plain or residual).

    Node sets follow the floor length law; callers pad with
    :func:`circular_pad` beforehand when every node must be covered.
    """
    if cfg.inception_ks:
        return inception_layer(state, cfg.ks, kernel, cfg.s, cfg.residual)
    H = ops.relu(diagonal_conv(state.E, state.H, kernel, cfg.s))
    if cfg.residual:
        H = H + ops.avg_pool_1d(state.H, cfg.k, cfg.s)
    return LevelState(H, _update_edges(state.E, cfg.k, cfg.s))


def inception_layer(state, ks, kernels, s=1, residual=False):
    """Parallel kernels of different sizes, average-pooled to a common length and summed."""
    if not ks:
        raise ValueError("inception layer needs at least one kernel size")
    if len(kernels) != len(ks):
        raise ValueError(f"{len(ks)} kernel sizes but {len(kernels)} kernels")
    n = state.n
    lengths = [out_length(n, k, s) for k in ks]
    target = min(lengths)
    total = None
    for k, kern, length in zip(ks, kernels, lengths):
        branch = ops.relu(diagonal_conv(state.E, state.H, kern, s))
        if residual:
            branch = branch + ops.avg_pool_1d(state.H, k, s)
        if length > target:
            branch = ops.avg_pool_1d(branch, length - target + 1, 1)
        total = branch if total is None else total + branch
    return LevelState(total, _update_edges(state.E, max(ks), s))


def transposed_conv_layer(H_hat, k, s, weight, target_len):
    """ReLU(AvgPool(Dilat(H_hat))) - TConv(H_hat), with ``target_len`` rows.

    ``weight`` has shape (k, c_in, c_out). The average term replicates the
    boundary rows of the dilated sequence before pooling with window k and
    unit step; any rows beyond the natural length ``(m-1)s + k`` are filled by
    extra right padding for the average term and zero rows for TConv.
    """
    H_hat = as_tensor(H_hat)
    m = H_hat.shape[-2]
    natural = (m - 1) * s + k
    if not natural <= target_len < natural + s:
        raise SizeError(
            f"transposed layer cannot map length {m} (natural {natural}) to length {target_len}"
        )
    if weight.shape[1] != H_hat.shape[-1]:
        raise DimensionError(f"kernel {weight.shape} does not match features {H_hat.shape}")
    tconv = ops.conv_transpose_1d(H_hat, weight, s, target_len)
    dil = ops.dilate_1d(H_hat, s)
    L = dil.shape[-2]
    extra = target_len - natural
    idx = np.concatenate([np.zeros(k - 1, dtype=np.int64), np.arange(L),
                          np.full(k - 1 + extra, L - 1, dtype=np.int64)])
    avg = ops.avg_pool_1d(dil[..., idx, :], k, 1)
    if avg.shape[-1] != tconv.shape[-1]:
        raise DimensionError(
            f"average term has {avg.shape[-1]} channels but TConv produces {tconv.shape[-1]}"
        )
    return ops.relu(avg) - tconv


def circular_pad(state, N):
    """Extend H rows and E rows/cols cyclically to length N."""
    n = state.n
    if N == n:
        return state
    idx = np.arange(N) % n
    H = state.H[..., idx, :]
    if isinstance(state.E, EdgeSet):
        E = state.E.circular_pad(N)
    else:
        E = state.E[..., idx[:, None], idx[None, :]]
    return LevelState(H, E)


@dataclass
class EdgeSet:
    """Sparse structure features: ``vals[ch, e]`` sits at ``(rows[e], cols[e])``.

    Values must be non-negative, so that the max over a pooling window that
    misses some implicit zeros is still exact.
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: Tensor
    _dense_cache: dict = field(default_factory=dict, repr=False)

    @property
    def channels(self):
        return self.vals.shape[0]

    @property
    def nnz(self):
        return self.rows.size

    @classmethod
    def from_dense(cls, E):
        E = np.asarray(E)
        if E.ndim == 2:
            E = E[None]
        nz = np.nonzero((E != 0).any(axis=0))
        return cls(E.shape[-1], nz[0], nz[1], Tensor(E[:, nz[0], nz[1]]))

    def to_dense(self):
        out = np.zeros((self.channels, self.n, self.n))
        out[:, self.rows, self.cols] = self.vals.data
        return out

    def filter(self, keep):
        keep = np.flatnonzero(keep)
        return EdgeSet(self.n, self.rows[keep], self.cols[keep], self.vals[:, keep])

    def circular_pad(self, N):
        n = self.n
        reps = -(-N // n)
        r_parts, c_parts, src = [], [], []
        for u in range(reps):
            for v in range(reps):
                r = self.rows + u * n
                c = self.cols + v * n
                ok = (r < N) & (c < N)
                r_parts.append(r[ok])
                c_parts.append(c[ok])
                src.append(np.flatnonzero(ok))
        src = np.concatenate(src)
        return EdgeSet(N, np.concatenate(r_parts), np.concatenate(c_parts), self.vals[:, src])

    def max_pool(self, k, s):
        m = out_length(self.n, k, s)
        if m < 1:
            raise SizeError(f"sequence length {self.n} is shorter than kernel size {k}")
        e_idx, tr, tc = _window_targets(self.rows, self.cols, k, s, m)
        if e_idx.size == 0:
            return EdgeSet(m, np.zeros(0, np.int64), np.zeros(0, np.int64),
                           Tensor(np.zeros((self.channels, 0))))
        keys, inv = np.unique(tr * m + tc, return_inverse=True)
        vals = ops.segment_max(self.vals[:, e_idx], inv, keys.size)
        return EdgeSet(m, keys // m, keys % m, vals)


def _window_starts(idx, k, s, m):
    """All (position, window) pairs with s*j <= idx < s*j + k."""
    pos, win = [], []
    for o in range(k):
        start = idx - o
        ok = (start >= 0) & (start % s == 0) & (start // s < m)
        pos.append(np.flatnonzero(ok))
        win.append(start[ok] // s)
    return np.concatenate(pos), np.concatenate(win)


def _window_targets(rows, cols, k, s, m):
    """Enumerate (edge, target row window, target col window) triples."""
    rp, rw = _window_starts(rows, k, s, m)
    cp, cw = _window_starts(cols, k, s, m)
    # join on edge index: for each edge, cartesian product of its row and col windows
    order_r = np.argsort(rp, kind="stable")
    order_c = np.argsort(cp, kind="stable")
    rp, rw = rp[order_r], rw[order_r]
    cp, cw = cp[order_c], cw[order_c]
    ne = rows.size
    r_start = np.searchsorted(rp, np.arange(ne))
    r_cnt = np.searchsorted(rp, np.arange(ne), side="right") - r_start
    c_start = np.searchsorted(cp, np.arange(ne))
    c_cnt = np.searchsorted(cp, np.arange(ne), side="right") - c_start
    e_parts, tr_parts, tc_parts = [], [], []
    for a in range(k):
        for b in range(k):
            ok = (r_cnt > a) & (c_cnt > b)
            e = np.flatnonzero(ok)
            e_parts.append(e)
            tr_parts.append(rw[r_start[e] + a])
            tc_parts.append(cw[c_start[e] + b])
    return np.concatenate(e_parts), np.concatenate(tr_parts), np.concatenate(tc_parts)


def _edge_part_sparse(E, kernel, s, m):
    """Edge-kernel contribution sum_pq w_pq E[i+p, i+q] from a sparse edge set."""
    k = kernel.k
    ce = E.channels
    out = kernel.out_channels
    if kernel.w.shape[1] != ce:
        raise DimensionError(f"edge kernel {kernel.w.shape} does not match {ce} edge channels")
    # windows containing both endpoints: start i with max(r,c)-k < i <= min(r,c)
    lo = np.minimum(E.rows, E.cols)
    hi = np.maximum(E.rows, E.cols)
    e_parts, j_parts = [], []
    for o in range(k):
        start = lo - o
        ok = (start >= 0) & (start % s == 0) & (start // s < m) & (hi < start + k)
        e_parts.append(np.flatnonzero(ok))
        j_parts.append(start[ok] // s)
    e = np.concatenate(e_parts)
    j = np.concatenate(j_parts)
    p = E.rows[e] - s * j
    q = E.cols[e] - s * j
    ch = np.arange(ce)[:, None]
    ids = j[None, :] * (ce * k * k) + ch * (k * k) + (p * k + q)[None, :]
    flat_vals = E.vals[:, e].reshape(1, ce * e.size)
    Z = ops.segment_sum(flat_vals, ids.reshape(-1), m * ce * k * k).reshape(m, ce * k * k)
    return Z @ kernel.w.reshape(out, ce * k * k).T
