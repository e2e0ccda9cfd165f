import math

import numpy as np


def cosine_lr(step, total, lr0):
    """Half-cosine decay from ``lr0`` at step 0 to 0 at ``total``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if total == 0:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total))


class SGD:
    """SGD with heavy-ball momentum: ``v <- m*v + g``, ``p <- p - lr*v``.

    Updates the arrays in ``params`` in place; only names present in the
    gradient dict are touched.
    """

    def __init__(self, params, momentum=0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads, lr):
        for name, g in grads.items():
            v = self.velocity[name]
            v *= self.momentum
            v += g
            self.params[name] -= lr * v
