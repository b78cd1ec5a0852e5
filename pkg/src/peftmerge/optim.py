"""Adam optimizer over named parameter dicts.

Shared by backbone pre-training and per-task module training.  State and
updates keep the parameter dtype (float32 in normal runs); iteration
follows dict insertion order, which is the canonical parameter order, so
updates are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = params
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if set(grads) != set(self.params):
            missing = set(self.params) ^ set(grads)
            raise KeyError(f"gradient keys do not match parameters: {sorted(missing)}")
        self.t += 1
        b1t = 1.0 - BETA1**self.t
        b2t = 1.0 - BETA2**self.t
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * np.square(g)
            m_hat = m / b1t
            v_hat = v / b2t
            p -= (self.lr * m_hat / (np.sqrt(v_hat) + EPS)).astype(p.dtype)
