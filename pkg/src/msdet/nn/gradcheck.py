"""Finite-difference gradient checking.

The oracle runs entirely in float64: the fragment's parameters are cast
up, the loss is a random linear probe of the output, and every parameter
and input element is perturbed with central differences.  Returns the
worst relative error over all of them.

Note the fragment is mutated (parameters become float64); build a fresh
fragment per check.
"""

import numpy as np


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(fragment, inputs, eps=1e-4, rng=None):
    """Max relative error between analytic and central-difference gradients.

    fragment: object with forward(*inputs), backward(gy), params(),
    param_grads().  inputs: one array or a tuple of arrays.  The fragment
    must be differentiable at the inputs; nudge ReLU inputs away from 0.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if not isinstance(inputs, (tuple, list)):
        inputs = (inputs,)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    fragment.astype(np.float64)

    def loss(xs):
        return float((fragment.forward(*xs) * probe).sum())

    y = fragment.forward(*inputs)
    probe = rng.normal(size=y.shape)

    gin = fragment.backward(probe)
    if not isinstance(gin, tuple):
        gin = (gin,)
    analytic_params = {k: g.copy() for k, g in fragment.param_grads().items()}

    worst = 0.0
    for name, p in fragment.params().items():
        ga = analytic_params[name]
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(inputs)
            flat[i] = orig - eps
            dn = loss(inputs)
            flat[i] = orig
            worst = max(worst, _rel_err(ga.reshape(-1)[i], (up - dn) / (2 * eps)))
    for xi, x in enumerate(inputs):
        ga = np.asarray(gin[xi]).reshape(-1)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(inputs)
            flat[i] = orig - eps
            dn = loss(inputs)
            flat[i] = orig
            worst = max(worst, _rel_err(ga[i], (up - dn) / (2 * eps)))
    return worst
