"""Learned node orderings turned into (soft) permutation matrices.

Positions are regressed per node, ranked by global pairwise comparison, and
materialized either as a dense relaxed matrix whose sharpness is set by
``tau`` or as a hard ranking whose backward pass uses a first-order Taylor
approximation.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.special import expit

from .autodiff.tensor import record
from .autodiff import (
    DimensionError,
    Tensor,
    as_tensor,
    fan_in_uniform,
    mod_shift,
    ops,
    rank_approx_grad,
    sign_surrogate,
    stable_ranks,
)

log = logging.getLogger(__name__)

IMPLICIT_RIDGE = 1e-8
HEAD_JITTER = 1e-4


class PositionRegressor:
    """MLP mapping node features to one approximate position per head.

    Hidden layers use ReLU and the last layer is linear with ``heads``
    outputs, so every head shares the hidden trunk.
    """

    def __init__(self, in_dim, hidden=(), heads=1, t=1, seed=0, rng=None):
        rng = np.random.default_rng(seed) if rng is None else rng
        self.in_dim = in_dim
        self.t = int(t)
        self.heads = int(heads)
        sizes = [in_dim, *hidden, heads]
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = fan_in_uniform(rng, (a, b), a, name=f"pos.w{i}")
            bias = fan_in_uniform(rng, (b,), a, name=f"pos.b{i}")
            self.layers.append((w, bias))

    def parameters(self):
        return [p for layer in self.layers for p in layer]

    def mlp(self, X):
        X = as_tensor(X)
        if X.shape[-1] != self.in_dim:
            raise DimensionError(
                f"position regressor expects {self.in_dim} features, got shape {X.shape}"
            )
        h = X
        for i, (w, b) in enumerate(self.layers):
            h = h @ w + b
            if i < len(self.layers) - 1:
                h = ops.relu(h)
        return h


def regress_position_explicit(X, A_norm, reg):
    """r_A = A_norm^t MLP(X), shape (n, heads)."""
    X = as_tensor(X)
    if A_norm.shape != (X.shape[0], X.shape[0]):
        raise DimensionError(
            f"normalized adjacency {A_norm.shape} does not match features {X.shape}"
        )
    r = reg.mlp(X)
    for _ in range(reg.t):
        r = ops.spmm(A_norm, r)
    return r


def implicit_closed_form(d):
    """Matrix and right-hand side of the parameter-free position formula.

    ``M = diag(((2/n) d - 1)^2 1) + (4/n) d - I`` and ``rhs = (2/n) d^2 1``.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    M = np.diag(((2.0 * d / n - 1.0) ** 2).sum(axis=1)) + (4.0 / n) * d - np.eye(n)
    rhs = (2.0 / n) * (d ** 2).sum(axis=1)
    return M, rhs


def implicit_design_matrix(d):
    """Dense (n*n) x n system ``B r ~ vec(d)`` from the pairwise constraints.

    Each ordered pair (i, j), at row ``i*n + j``, states
    ``r_j + (2 d_ij / n - 1) r_i = d_ij``.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    c = 2.0 * d / n - 1.0
    B = np.zeros((n * n, n))
    rows = np.arange(n * n)
    i, j = np.divmod(rows, n)
    np.add.at(B, (rows, j), 1.0)
    np.add.at(B, (rows, i), c.ravel())
    return B, d.ravel()


def implicit_least_squares(d):
    """Exact least-squares solution of the pairwise system via its normal equations.

    ``r = (n/2) 1`` satisfies every constraint exactly, so whenever the
    system has full column rank the solution is that constant vector.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    c = 2.0 * d / n - 1.0
    M = n * np.eye(n) + np.diag((c ** 2).sum(axis=1)) + c + c.T
    rhs = (2.0 / n) * (d ** 2).sum(axis=1)
    return scipy.linalg.solve(M, rhs, assume_a="sym")


def regress_position_implicit(dist, heads=1):
    """Parameter-free positions from scaled shortest-path distances.

    Returns an (n, heads) array. Head ``h`` adds ``h * 1e-4 * index / n`` so
    heads give distinct but nearly identical orders.
    """
    d = dist.d_scaled if hasattr(dist, "d_scaled") else np.asarray(dist)
    n = d.shape[0]
    M, rhs = implicit_closed_form(d)
    try:
        with np.errstate(all="raise"):
            r = scipy.linalg.solve(M, rhs, check_finite=False)
        ok = np.all(np.isfinite(r)) and np.linalg.cond(M) < 1e12
    except (scipy.linalg.LinAlgError, FloatingPointError):
        ok = False
    if not ok:
        log.warning("implicit position system is near singular; using ridge %g", IMPLICIT_RIDGE)
        r = scipy.linalg.lstsq(M + IMPLICIT_RIDGE * np.eye(n), rhs)[0]
    jitter = HEAD_JITTER * np.arange(n) / n
    return np.stack([r + h * jitter for h in range(heads)], axis=1)


@dataclass
class AbsolutePosition:
    r: Tensor

    @property
    def values(self):
        return self.r.data


def _tie_offset(values):
    """Number of earlier-indexed entries (axis 0) equal to each entry."""
    eq = values[:, None, ...] == values[None, :, ...]
    n = values.shape[0]
    lower = np.tril(np.ones((n, n), dtype=bool), k=-1)
    lower = lower.reshape((n, n) + (1,) * (values.ndim - 1))
    return (eq & lower).sum(axis=1).astype(np.float64)


def pairwise_rank_composed(r_a):
    """Reference composition: sum_j step(r_a_i - r_a_j) plus the index tie-break.

    Materializes every pairwise difference on the tape; used as the oracle
    for the fused version.
    """
    r_a = as_tensor(r_a)
    n = r_a.shape[0]
    rest = r_a.shape[1:]
    diff = r_a.reshape((n, 1) + rest) - r_a.reshape((1, n) + rest)
    return sign_surrogate(diff).sum(axis=1) + _tie_offset(r_a.data)


_CHUNK = 512


def _surrogate_slope(x):
    s = expit(x)
    return np.where(x > 0, s * (1.0 - s), 0.0)


def pairwise_rank(r_a):
    """Fused global pairwise comparison along axis 0.

    Same value and gradient as :func:`pairwise_rank_composed`, but the
    backward pass recomputes pairwise surrogate slopes in row chunks so only
    O(n) memory stays on the tape.
    """
    r_a = as_tensor(r_a)
    n = r_a.shape[0]
    cols = r_a.data.reshape(n, -1)
    ranks = np.empty_like(cols)
    for c in range(cols.shape[1]):
        ranks[:, c] = stable_ranks(cols[:, c])

    def backward(g):
        g = g.reshape(n, -1)
        out = np.zeros_like(cols)
        for c in range(cols.shape[1]):
            a, gc = cols[:, c], g[:, c]
            for lo in range(0, n, _CHUNK):
                hi = min(lo + _CHUNK, n)
                slope = _surrogate_slope(a[lo:hi, None] - a[None, :])
                out[lo:hi, c] += gc[lo:hi] * slope.sum(axis=1)
                out[:, c] -= gc[lo:hi] @ slope
        return (out.reshape(r_a.shape),)

    return record(ranks.reshape(r_a.shape), (r_a,), backward)


def absolute_position(r_a, mode="dense"):
    """Ranks of approximate positions by global pairwise comparison.

    ``r_a`` is (n,) or (n, *batch). The dense mode differentiates through the
    sigmoid-of-ReLU step surrogate on every pair; the sparse mode sorts and
    uses the Taylor backward.
    """
    r_a = as_tensor(r_a)
    if mode == "sparse":
        if r_a.ndim == 1:
            return AbsolutePosition(rank_approx_grad(r_a))
        if r_a.ndim != 2:
            raise DimensionError(f"sparse ranking expects (n,) or (n, heads), got {r_a.shape}")
        cols = [rank_approx_grad(r_a[:, h]) for h in range(r_a.shape[1])]
        return AbsolutePosition(ops.stack(cols, axis=1))
    if mode != "dense":
        raise ValueError(f"unknown mode {mode!r}")
    return AbsolutePosition(pairwise_rank(r_a))


@dataclass
class RelaxedPermutation:
    p_hat: Tensor
    tau: float

    @property
    def n(self):
        return self.p_hat.shape[-1]


def _positions_last(r):
    r = r.r if isinstance(r, AbsolutePosition) else as_tensor(r)
    if r.ndim > 1:
        # positions run along axis 0; batch axes move in front of the matrix
        r = ops.transpose(r, tuple(range(1, r.ndim)) + (0,))
    return r


def relaxed_permutation_composed(r, tau):
    """Reference composition exp(-tau * mod_shift(m 1^T - 1 r^T + n, n))."""
    r = _positions_last(r)
    n = r.shape[-1]
    m = np.arange(n, dtype=np.float64)[:, None]
    shifted = m - r.reshape(r.shape[:-1] + (1, n)) + n
    return RelaxedPermutation(ops.exp(mod_shift(shifted, n) * (-tau)), tau)


def relaxed_permutation(r, tau):
    """P_ij = exp(-tau * ((i - r_j + n) mod n)).

    ``r`` of shape (n,) gives an (n, n) matrix; (n, *batch) gives
    (*batch, n, n), e.g. (n, heads) -> (heads, n, n). The exponent, modulo
    (unit-slope gradient) and exponential are fused into one tape node, so
    only the output matrix is kept for the backward pass.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    r = _positions_last(r)
    n = r.shape[-1]
    m = np.arange(n, dtype=np.float64)[:, None]
    P = np.exp(-tau * np.mod(m - r.data[..., None, :] + n, n))

    def backward(g):
        return (tau * (g * P).sum(axis=-2),)

    return RelaxedPermutation(record(P, (r,), backward), tau)


def hard_permutation(r):
    """0/1 matrix with a one at (r_j, j)."""
    r = np.asarray(r, dtype=np.int64)
    P = np.zeros((r.size, r.size))
    P[r, np.arange(r.size)] = 1.0
    return P


@dataclass
class SparsePermutation:
    """Hard ranking ``rank_of`` plus per-node weights equal to one in value.

    The weights ``exp(rank - r)`` carry the gradient to the positions.
    """

    rank_of: np.ndarray
    grad_weight: Tensor

    @property
    def n(self):
        return self.rank_of.size

    @property
    def order(self):
        """Node placed at each row (inverse of ``rank_of``)."""
        return np.argsort(self.rank_of)

    def to_dense(self):
        P = np.zeros((self.n, self.n))
        P[self.rank_of, np.arange(self.n)] = self.grad_weight.data
        return P


def sparse_permutation(r_a):
    r_a = as_tensor(r_a)
    if r_a.ndim != 1:
        raise DimensionError(f"sparse_permutation expects a vector, got shape {r_a.shape}")
    r = rank_approx_grad(r_a)
    rank_of = stable_ranks(r_a.data)
    weight = ops.exp(Tensor(rank_of.astype(np.float64)) - r)
    return SparsePermutation(rank_of, weight)


def _dense_constant(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=np.float64)


def permute(perm, X, A):
    """Return (P X, P A P^T).

    ``A`` is a constant adjacency (scipy sparse or dense). A relaxed
    permutation with heads yields leading head axes on both outputs.
    """
    X = as_tensor(X)
    if X.ndim != 2:
        raise DimensionError(f"features must be 2-D, got shape {X.shape}")
    if isinstance(perm, SparsePermutation):
        return _permute_sparse(perm, X, A)
    P = perm.p_hat if isinstance(perm, RelaxedPermutation) else as_tensor(perm)
    n = P.shape[-1]
    if X.shape[0] != n or A.shape != (n, n):
        raise DimensionError(
            f"permutation of size {n} does not match features {X.shape} and adjacency {A.shape}"
        )
    X_hat = P @ X
    Pt = P.T
    AP = ops.spmm(A, Pt) if sp.issparse(A) else Tensor(_dense_constant(A)) @ Pt
    return X_hat, P @ AP


def _permute_sparse(perm, X, A):
    n = perm.n
    if X.shape[0] != n or A.shape != (n, n):
        raise DimensionError(
            f"permutation of size {n} does not match features {X.shape} and adjacency {A.shape}"
        )
    w = perm.grad_weight
    X_hat = (X * w.reshape(n, 1))[perm.order]
    coo = sp.coo_matrix(A)
    rows, cols = perm.rank_of[coo.row], perm.rank_of[coo.col]
    vals = w[coo.row] * w[coo.col] * Tensor(coo.data)
    A_hat = ops.segment_sum(vals, rows * n + cols, n * n).reshape(n, n)
    return X_hat, A_hat


def permute_edges(perm, A):
    """Permuted adjacency as (rows, cols, values) without densifying."""
    coo = sp.coo_matrix(A)
    w = perm.grad_weight
    rows, cols = perm.rank_of[coo.row], perm.rank_of[coo.col]
    vals = w[coo.row] * w[coo.col] * Tensor(coo.data)
    return rows, cols, vals


def unpermute(perm, H):
    """P^T H: send permuted rows back to their original nodes."""
    H = as_tensor(H)
    if isinstance(perm, SparsePermutation):
        return H[perm.rank_of] * perm.grad_weight.reshape(perm.n, 1)
    P = perm.p_hat if isinstance(perm, RelaxedPermutation) else as_tensor(perm)
    return P.T @ H
