"""Central finite-difference check of tape gradients."""

import numpy as np

from .tensor import DTYPE, Tape, Tensor


def finite_difference_check(f, x, eps=1e-5):
    """Largest relative gap between tape and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Returns the maximum over entries
    of ``|g_fd - g_ad| / (|g_fd| + 1e-8)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    t = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(t)
    tape.backward(out)
    g_ad = np.zeros_like(base) if t.grad is None else t.grad

    g_fd = np.empty_like(base)
    flat = base.reshape(-1)
    view = g_fd.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = float(f(Tensor(base)).data)
        flat[i] = old - eps
        down = float(f(Tensor(base)).data)
        flat[i] = old
        view[i] = (up - down) / (2 * eps)
    return float(np.max(np.abs(g_fd - g_ad) / (np.abs(g_fd) + 1e-8)))
