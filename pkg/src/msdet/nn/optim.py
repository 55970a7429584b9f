"""Plain SGD plus a momentum wrapper used by the trainer."""

import numpy as np

from ..errors import ContractError


def sgd_step(params, grads, lr):
    """In-place update w <- w - lr * g for every named parameter.

    Raises if any trainable parameter is missing its gradient.
    """
    missing = [k for k in params if k not in grads or grads[k] is None]
    if missing:
        raise ContractError(f"sgd_step missing gradients for: {', '.join(sorted(missing))}")
    for k, p in params.items():
        p -= np.asarray(lr * grads[k], dtype=p.dtype)
    return params


class MomentumSGD:
    """Classic momentum: v <- mu * v + g; w <- w - lr * v."""

    def __init__(self, params, lr, momentum=0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads):
        for k in self.params:
            if k not in grads or grads[k] is None:
                raise ContractError(f"missing gradient for parameter {k}")
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k]
        sgd_step(self.params, self.velocity, self.lr)
