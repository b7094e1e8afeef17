"""Watch a relaxed permutation sharpen as tau grows.

Ranks a small path graph with an untrained position regressor, then prints
the relaxed matrix at a few temperatures next to the hard permutation.
"""

import numpy as np

from cocn.graph import Graph, normalized_adjacency
from cocn.permutation import (
    PositionRegressor,
    absolute_position,
    hard_permutation,
    regress_position_explicit,
    relaxed_permutation,
)

np.set_printoptions(precision=3, suppress=True)

g = Graph(6, [(i, i + 1) for i in range(5)])
X = np.random.default_rng(0).normal(size=(6, 3))
reg = PositionRegressor(3, hidden=(8,), heads=1, t=1, seed=0)

r_a = regress_position_explicit(X, normalized_adjacency(g), reg)[:, 0]
r = absolute_position(r_a)
print("approximate positions:", r_a.data)
print("ranks:", r.r.data)

target = hard_permutation(r.r.data.astype(int))
for tau in (0.1, 1.0, 10.0):
    P = relaxed_permutation(r, tau).p_hat.data
    print(f"\ntau={tau}: off-target mass {P[target == 0].sum():.4f}")
    print(P)
