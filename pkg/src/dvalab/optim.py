"""Adam over named float64 arrays, updated in place."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> None:
        """One update.  Parameters missing from ``grads`` get a zero gradient."""
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            m, v = self.m[name], self.v[name]
            if g is None:
                m *= b1
                v *= b2
            else:
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    """Optimizer schedule shared by every trainer.

    ``batch=None`` means full batch.  When ``lr_final`` is set the learning
    rate decays geometrically from ``lr`` to ``lr_final``, starting after
    the fraction ``decay_from`` of the epochs (0 decays over the whole run).
    """

    lr: float = 0.01
    epochs: int = 200
    batch: int | None = 100
    lr_final: float | None = None
    decay_from: float = 0.0

    def lr_at(self, epoch: int) -> float:
        start = int(self.decay_from * self.epochs)
        if self.lr_final is None or epoch < start or self.epochs - 1 <= start:
            return self.lr
        frac = (epoch - start) / (self.epochs - 1 - start)
        return self.lr * (self.lr_final / self.lr) ** frac

    def batches(self, n: int, rng: np.random.Generator) -> list[np.ndarray]:
        """Index blocks of one shuffled epoch."""
        order = rng.permutation(n)
        size = n if self.batch is None else min(self.batch, n)
        return [order[i : i + size] for i in range(0, n, size)]
