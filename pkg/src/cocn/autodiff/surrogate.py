"""Nodes whose backward pass is a surrogate rather than the true derivative.

Finite differences do not apply to these; tests compare them with the
backward formulas written out here.
"""

import numpy as np
from scipy.special import expit

from .tensor import DTYPE, as_tensor, record

__all__ = ["sign_surrogate", "mod_shift", "rank_approx_grad", "stable_ranks"]


def sign_surrogate(x):
    """Step function forward, derivative of ``sigmoid(relu(x))`` backward."""
    x = as_tensor(x)
    pos = x.data > 0
    s = expit(x.data)
    slope = np.where(pos, s * (1.0 - s), 0.0)
    return record(pos.astype(DTYPE), (x,), lambda g: (g * slope,))


def mod_shift(a, n):
    """``a mod n`` forward; the gradient passes through unchanged."""
    a = as_tensor(a)
    return record(np.mod(a.data, n), (a,), lambda g: (g,))


def stable_ranks(values):
    """Ascending ranks 0..n-1; equal values are ordered by index."""
    values = np.asarray(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0], dtype=np.int64)
    ranks[order] = np.arange(values.shape[0])
    return ranks


def rank_approx_grad(r_a):
    """Discrete ranks of a vector with a first-order Taylor backward.

    The backward pass is the gradient of ``r_hat / 4`` where
    ``r_hat_i = rank_i * r_a_i - sum_{j: rank_j < rank_i} r_a_j``, evaluated in
    O(n log n) with a suffix sum over the sorted order.
    """
    r_a = as_tensor(r_a)
    if r_a.ndim != 1:
        raise ValueError(f"rank_approx_grad expects a vector, got shape {r_a.shape}")
    ranks = stable_ranks(r_a.data)
    order = np.argsort(ranks)

    def backward(g):
        g_sorted = g[order]
        # sum of g over strictly higher ranks
        suffix = np.concatenate([np.cumsum(g_sorted[::-1])[::-1][1:], [0.0]])
        out = np.empty_like(g)
        out[order] = 0.25 * (g_sorted * np.arange(g.size) - suffix)
        return (out,)

    return record(ranks.astype(DTYPE), (r_a,), backward)
