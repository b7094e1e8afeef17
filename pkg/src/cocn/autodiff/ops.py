"""Differentiable primitives over dense float64 arrays.

Every function takes :class:`Tensor` (or array-like) inputs and returns a
Tensor; when a tape is recording, the closure registered with the output
maps the upstream gradient to one gradient per input.
"""

import builtins

import numpy as np
from scipy.special import expit

from .tensor import DTYPE, DimensionError, Tensor, as_tensor, record

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "spmm", "relu", "sigmoid",
    "exp", "log", "transpose", "reshape", "concat", "stack", "getitem", "sum",
    "mean", "max", "max_pool_2d", "avg_pool_1d", "dilate_1d",
    "conv_transpose_1d", "layer_norm", "cross_entropy", "segment_sum",
    "segment_max", "where_const",
]


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, name):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "subtract")
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "multiply")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "divide")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def spmm(S, x):
    """Constant sparse (or dense) matrix ``S`` times ``x`` of shape (..., n, c)."""
    x = as_tensor(x)
    if x.ndim < 2 or S.shape[1] != x.shape[-2]:
        raise DimensionError(f"spmm: incompatible shapes {S.shape} and {x.shape}")
    lead = x.shape[:-2]
    St = S.T

    def apply(M, v, rows_in):
        # fold leading axes into columns so one sparse product covers all
        moved = np.moveaxis(v, -2, 0).reshape(rows_in, -1)
        res = np.asarray(M @ moved)
        res = res.reshape((M.shape[0],) + lead + (v.shape[-1],))
        return np.moveaxis(res, 0, -2)

    out = apply(S, x.data, S.shape[1])
    return record(out, (x,), lambda g: (apply(St, g, S.shape[0]),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    s = expit(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record(out, tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"stack: incompatible shapes {shapes}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(out, tuple(tensors), backward)


def _is_advanced(key):
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in parts)


def getitem(a, key):
    """Slicing and gather; duplicate indices accumulate in the backward pass."""
    a = as_tensor(a)
    out = a.data[key]
    advanced = _is_advanced(key)

    def backward(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        if advanced:
            np.add.at(ga, key, g)
        else:
            ga[key] += g
        return (ga,)

    return record(np.array(out, dtype=DTYPE), (a,), backward)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / builtins.max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return record(out, (a,), backward)


def max(a, axis=-1):
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(ga, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return record(out, (a,), backward)


def _pool_len(n, k, s):
    return (n - k) // s + 1


def max_pool_2d(a, k, s=None):
    """k x k max pooling with stride ``s`` over the last two axes.

    Ties resolve to the first window entry in row-major order, which is also
    where the gradient is routed.
    """
    a = as_tensor(a)
    s = k if s is None else s
    n0, n1 = a.shape[-2], a.shape[-1]
    if n0 < k or n1 < k:
        raise DimensionError(f"max_pool_2d: window {k} larger than input {a.shape[-2:]}")
    m0, m1 = _pool_len(n0, k, s), _pool_len(n1, k, s)
    span0, span1 = s * (m0 - 1) + 1, s * (m1 - 1) + 1
    best = None
    arg = np.zeros(a.shape[:-2] + (m0, m1), dtype=np.min_scalar_type(k * k))
    for p in range(k):
        for q in range(k):
            cand = a.data[..., p:p + span0:s, q:q + span1:s]
            if best is None:
                best = cand.copy()
                continue
            better = cand > best
            best = np.where(better, cand, best)
            arg[better] = p * k + q

    def backward(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        for p in range(k):
            for q in range(k):
                hit = arg == p * k + q
                if hit.any():
                    ga[..., p:p + span0:s, q:q + span1:s] += np.where(hit, g, 0.0)
        return (ga,)

    return record(best, (a,), backward)


def avg_pool_1d(a, k, s=1):
    """Mean over windows of ``k`` rows with stride ``s`` (axis -2)."""
    a = as_tensor(a)
    n = a.shape[-2]
    if n < k:
        raise DimensionError(f"avg_pool_1d: window {k} larger than length {n}")
    m = _pool_len(n, k, s)
    span = s * (m - 1) + 1
    out = np.zeros(a.shape[:-2] + (m, a.shape[-1]), dtype=DTYPE)
    for p in range(k):
        out += a.data[..., p:p + span:s, :]
    out /= k

    def backward(g):
        ga = np.zeros(a.shape, dtype=DTYPE)
        for p in range(k):
            ga[..., p:p + span:s, :] += g / k
        return (ga,)

    return record(out, (a,), backward)


def dilate_1d(a, s):
    """Insert ``s - 1`` zero rows between consecutive rows (axis -2)."""
    a = as_tensor(a)
    m = a.shape[-2]
    out = np.zeros(a.shape[:-2] + ((m - 1) * s + 1, a.shape[-1]), dtype=DTYPE)
    out[..., ::s, :] = a.data
    return record(out, (a,), lambda g: (g[..., ::s, :].copy(),))


def conv_transpose_1d(x, w, s=1, out_len=None):
    """Transposed 1-D convolution along rows.

    ``x`` has shape (..., m, c_in) and ``w`` shape (k, c_in, c_out); input row
    ``j`` spreads onto output rows ``j*s .. j*s + k - 1``. The natural output
    length ``(m - 1) * s + k`` may be extended with trailing zero rows up to
    ``out_len``.
    """
    x, w = as_tensor(x), as_tensor(w)
    k, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv_transpose_1d: input {x.shape} does not match kernel {w.shape}")
    m = x.shape[-2]
    natural = (m - 1) * s + k
    out_len = natural if out_len is None else out_len
    if out_len < natural:
        raise DimensionError(f"conv_transpose_1d: target length {out_len} shorter than {natural}")
    wmat = w.data.transpose(1, 0, 2).reshape(c_in, k * c_out)
    y = (x.data @ wmat).reshape(x.shape[:-1] + (k, c_out))
    span = s * (m - 1) + 1
    out = np.zeros(x.shape[:-2] + (out_len, c_out), dtype=DTYPE)
    for p in range(k):
        out[..., p:p + span:s, :] += y[..., p, :]

    def backward(g):
        gy = np.stack([g[..., p:p + span:s, :] for p in range(k)], axis=-2)
        gy2 = gy.reshape(x.shape[:-1] + (k * c_out,))
        gx = gy2 @ wmat.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            xs = x.data.reshape(-1, c_in)
            gwmat = xs.T @ gy2.reshape(-1, k * c_out)
            gw = gwmat.reshape(c_in, k, c_out).transpose(1, 0, 2)
        return gx, gw

    return record(out, (x, w), backward)


def layer_norm(a, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return record(xhat, (a,), backward)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of rows of ``logits`` against integer labels.

    For two classes this equals the sigmoid binary cross-entropy of the logit
    difference, so binary tasks use the same path.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    shift = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shift).sum(axis=-1, keepdims=True))
    logp = shift - logsum
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / z.shape[0],)

    return record(np.asarray(loss), (logits,), backward)


def segment_sum(a, ids, num):
    """Sum entries of the last axis into ``num`` buckets given by ``ids``."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(a.shape[:-1] + (num,), dtype=DTYPE)
    np.add.at(out, (..., ids), a.data)
    return record(out, (a,), lambda g: (g[..., ids],))


def segment_max(a, ids, num, empty=0.0):
    """Max of last-axis entries per bucket; empty buckets take ``empty``.

    Ties route the gradient to the first entry in input order.
    """
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    lead = a.shape[:-1]
    flat = a.data.reshape(-1, a.shape[-1])
    out = np.full((flat.shape[0], num), empty, dtype=DTYPE)
    arg = np.full((flat.shape[0], num), -1, dtype=np.int64)
    if ids.size:
        # sort by bucket, then by descending value, then by position
        pos = np.arange(ids.size)
        for row in range(flat.shape[0]):
            order = np.lexsort((pos, -flat[row], ids))
            sid = ids[order]
            first = np.ones(sid.size, dtype=bool)
            first[1:] = sid[1:] != sid[:-1]
            winners = order[first]
            out[row, ids[winners]] = flat[row, winners]
            arg[row, ids[winners]] = winners
    out = out.reshape(lead + (num,))
    arg = arg.reshape(lead + (num,))

    def backward(g):
        gflat = g.reshape(-1, num)
        aflat = arg.reshape(-1, num)
        ga = np.zeros_like(flat)
        for row in range(flat.shape[0]):
            ok = aflat[row] >= 0
            np.add.at(ga[row], aflat[row][ok], gflat[row][ok])
        return (ga.reshape(a.shape),)

    return record(out, (a,), backward)


def where_const(mask, a, fill=0.0):
    """Keep ``a`` where the constant boolean ``mask`` holds, ``fill`` elsewhere."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, fill)
    return record(out, (a,), lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),))
