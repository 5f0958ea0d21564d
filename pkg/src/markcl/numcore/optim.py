"""SGD with momentum and decoupled-into-gradient weight decay."""
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, ParameterError


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.01

    def __post_init__(self):
        # lr == 0 is accepted as an explicit no-op step
        if not self.learning_rate >= 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")


class SGD:
    """Stateful optimizer over an ordered list of tensors.

    v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v.
    Gradients are left in place; callers clear them.
    """

    def __init__(self, params, cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        cfg = self.cfg
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {p.name or i} has no gradient")
        for i, p in enumerate(self.params):
            w = p.data.astype(np.float64)
            d = p.grad.astype(np.float64)
            if cfg.weight_decay:
                d = d + cfg.weight_decay * w
            v = self.velocity[i]
            if cfg.momentum and v is not None:
                d = cfg.momentum * v + d
            self.velocity[i] = d
            if cfg.learning_rate == 0.0:
                continue
            p.data = (w - cfg.learning_rate * d).astype(p.data.dtype)


def sgd_step(params, cfg: SgdConfig, state=None):
    """One update of ``params``; ``state`` is an :class:`SGD` carrying velocity."""
    opt = state if state is not None else SGD(params, cfg)
    opt.step()
    return opt
