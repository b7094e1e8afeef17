"""Finite-difference suite over every smooth primitive plus a compressed-convolution stack.

Each case maps an input array to a scalar through a fixed random projection,
so one check covers the full Jacobian-vector structure of the op.
"""

import zlib

import numpy as np

from ..autodiff import Tensor, finite_difference_check, ops
from ..convolution import (
    DiagConvKernel,
    LayerConfig,
    LevelState,
    compressed_conv_layer,
    diagonal_conv,
    transposed_conv_layer,
)

FD_TOLERANCE = 1e-4


def _proj(rng, shape):
    return Tensor(rng.uniform(-1, 1, size=shape))


def _diag_conv_h(x, r):
    kern = DiagConvKernel.init(r, 3, 2, 4, 3)
    E = _proj(r, (2, 7, 7))
    return (diagonal_conv(E, x, kern, 2) * _proj(r, (3, 3))).sum()


def _diag_conv_e(x, r):
    kern = DiagConvKernel.init(r, 3, 2, 4, 3)
    H = _proj(r, (7, 4))
    return (diagonal_conv(x, H, kern, 1) * _proj(r, (5, 3))).sum()


def _conv_stack(x, r):
    """UCo (k=2) then PCo (k=2) on a 9-node input; gradient w.r.t. node features."""
    E = _proj(r, (1, 9, 9))
    k1 = DiagConvKernel.init(r, 4, 1, 3, 2)
    k2 = DiagConvKernel.init(r, 4, 1, 4, 2)
    st = compressed_conv_layer(LevelState(x, E), LayerConfig(2, 1, 4), k1)
    st = compressed_conv_layer(st, LayerConfig(2, 2, 4), k2)
    return (st.H * _proj(r, st.H.shape)).sum()


def _conv_stack_edges(x, r):
    """Same stack, differentiated w.r.t. the structure features."""
    H = _proj(r, (9, 4))
    k1 = DiagConvKernel.init(r, 4, 1, 4, 2)
    k2 = DiagConvKernel.init(r, 4, 1, 4, 2)
    st = compressed_conv_layer(LevelState(H, x), LayerConfig(2, 1, 4, residual=True), k1)
    st = compressed_conv_layer(st, LayerConfig(2, 2, 4), k2)
    return (st.H * _proj(r, st.H.shape)).sum()


def _transposed(x, r):
    out = transposed_conv_layer(x, 2, 2, _proj(r, (2, 3, 3)), 9)
    return (out * _proj(r, (9, 3))).sum()


CASES = {
    "add": ((3, 4), lambda x, r: (x + _proj(r, (4,))).sum()),
    "sub": ((3, 4), lambda x, r: ((_proj(r, (3, 1)) - x) * _proj(r, (3, 4))).sum()),
    "mul": ((3, 4), lambda x, r: (x * x * _proj(r, (3, 4))).sum()),
    "div": ((3, 4), lambda x, r: (_proj(r, (3, 4)) / (x + 3.0)).sum()),
    "neg": ((3, 4), lambda x, r: ((-x) * _proj(r, (3, 4))).sum()),
    "matmul": ((2, 3, 4), lambda x, r: ((x @ _proj(r, (4, 2))) * _proj(r, (2, 3, 2))).sum()),
    "spmm": ((2, 5, 3), lambda x, r: (ops.spmm(_sparse(r), x) * _proj(r, (2, 5, 3))).sum()),
    "relu": ((3, 4), lambda x, r: (ops.relu(x) * _proj(r, (3, 4))).sum()),
    "sigmoid": ((3, 4), lambda x, r: (ops.sigmoid(x) * _proj(r, (3, 4))).sum()),
    "exp": ((3, 4), lambda x, r: (ops.exp(x) * _proj(r, (3, 4))).sum()),
    "log": ((3, 4), lambda x, r: (ops.log(x + 2.0) * _proj(r, (3, 4))).sum()),
    "transpose": ((3, 4), lambda x, r: (x.T * _proj(r, (4, 3))).sum()),
    "reshape": ((3, 4), lambda x, r: (x.reshape(2, 6) * _proj(r, (2, 6))).sum()),
    "concat": ((3, 4), lambda x, r: (ops.concat([x, x * x], axis=1) * _proj(r, (3, 8))).sum()),
    "stack": ((3, 4), lambda x, r: (ops.stack([x, x * x], axis=0) * _proj(r, (2, 3, 4))).sum()),
    "slice": ((5, 4), lambda x, r: (x[1:4, ::2] * _proj(r, (3, 2))).sum()),
    "gather": ((5, 4), lambda x, r: (x[np.array([0, 2, 2, 4])] * _proj(r, (4, 4))).sum()),
    "sum": ((3, 4), lambda x, r: (x.sum(axis=0) * _proj(r, (4,))).sum()),
    "mean": ((3, 4), lambda x, r: (x.mean(axis=1) * _proj(r, (3,))).sum()),
    "max": ((3, 4), lambda x, r: (ops.max(x, axis=0) * _proj(r, (4,))).sum()),
    "where_const": ((3, 4), lambda x, r: (ops.where_const(r.random((3, 4)) > 0.5, x) * _proj(r, (3, 4))).sum()),
    "max_pool_2d": ((2, 6, 6), lambda x, r: (ops.max_pool_2d(x, 3, 2) * _proj(r, (2, 2, 2))).sum()),
    "avg_pool_1d": ((7, 3), lambda x, r: (ops.avg_pool_1d(x, 3, 2) * _proj(r, (3, 3))).sum()),
    "dilate_1d": ((4, 3), lambda x, r: (ops.dilate_1d(x, 3) * _proj(r, (10, 3))).sum()),
    "conv_transpose_1d": (
        (4, 3),
        lambda x, r: (ops.conv_transpose_1d(x, _proj(r, (3, 3, 2)), 2, 11) * _proj(r, (11, 2))).sum(),
    ),
    "layer_norm": ((3, 5), lambda x, r: (ops.layer_norm(x) * _proj(r, (3, 5))).sum()),
    "cross_entropy": ((4, 3), lambda x, r: ops.cross_entropy(x, [0, 2, 1, 2])),
    "segment_sum": ((2, 6), lambda x, r: (ops.segment_sum(x, [0, 1, 0, 3, 3, 1], 4) * _proj(r, (2, 4))).sum()),
    "segment_max": ((2, 6), lambda x, r: (ops.segment_max(x, [0, 1, 0, 3, 3, 1], 4) * _proj(r, (2, 4))).sum()),
    "diagonal_conv.H": ((7, 4), _diag_conv_h),
    "diagonal_conv.E": ((2, 7, 7), _diag_conv_e),
    "transposed_conv_layer": ((4, 3), _transposed),
    "conv_stack.H": ((9, 3), _conv_stack),
    "conv_stack.E": ((1, 9, 9), _conv_stack_edges),
}


def _sparse(r):
    from scipy import sparse

    return sparse.random(5, 5, density=0.4, random_state=int(r.integers(2**31)), format="csr")


def run_case(name, eps=1e-5):
    """Max relative FD error for one case; seeds derive from the case name."""
    shape, build = CASES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    x = rng.uniform(-1, 1, size=shape)
    seed = int(rng.integers(2**31))
    return finite_difference_check(lambda t: build(t, np.random.default_rng(seed)), Tensor(x), eps)


def run_suite(names=None):
    """{case name: max relative error} over all (or the given) cases."""
    return {name: run_case(name) for name in (names or sorted(CASES))}
