"""Adam with decoupled weight decay, and fan-in initialization."""

import numpy as np

from .tensor import Parameter


def adam_step(params, lr=1e-3, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
    """One in-place Adam update; parameters without a gradient are skipped.

    Weight decay scales the parameter by ``1 - lr * weight_decay`` before the
    moment-based step.
    """
    b1, b2 = betas
    for p in params:
        if p.grad is None:
            continue
        p.step += 1
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.m = b1 * p.m + (1 - b1) * p.grad
        p.v = b2 * p.v + (1 - b2) * p.grad ** 2
        m_hat = p.m / (1 - b1 ** p.step)
        v_hat = p.v / (1 - b2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def fan_in_uniform(rng, shape, fan_in, name=None):
    """Parameter drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return Parameter(rng.uniform(-bound, bound, size=shape), name=name)


def zero_grad(params):
    for p in params:
        p.grad = None
