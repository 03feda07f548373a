"""SGD with momentum and decoupled-from-nothing weight decay (classic form)."""

import numpy as np

from ..errors import UsageError


def sgd_step(params, lr, momentum=0.9, weight_decay=5e-4):
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    for p in params:
        if p.grad is None:
            raise UsageError("sgd_step: parameter has no gradient (run backward first)")
        v = p.velocity if p.velocity is not None else np.zeros_like(p.data)
        v = momentum * v + p.grad + weight_decay * p.data
        p.velocity = v
        p.data -= lr * v


def zero_grads(params):
    for p in params:
        p.grad = None
