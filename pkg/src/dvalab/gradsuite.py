"""Randomised finite-difference checks of every differentiable objective.

Each family draws a random configuration, builds the objective on the tape
and compares backward gradients with central differences through
:func:`autodiff.grad_check`.  Outputs are contracted with random weights so
no parameter has a structurally zero gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import mlp_tape
from .odeident import flow_on_tape
from .uncertainty import dva_loss, va_loss

TOLERANCE = {"mlp": 1e-5, "va": 1e-5, "dva": 1e-5, "flow": 1e-4}


def _layers(leaves):
    return list(zip(leaves[0::2], leaves[1::2]))


def _mlp_case(rng):
    widths = [int(rng.integers(1, 4))] + [int(rng.integers(2, 7)) for _ in range(int(rng.integers(1, 3)))] + [1]
    params = []
    for a, b in zip(widths[:-1], widths[1:]):
        params += [rng.standard_normal((b, a)) / np.sqrt(a), 0.5 * rng.standard_normal(b)]
    B = int(rng.integers(1, 6))
    x = rng.uniform(-2, 2, (B, widths[0]))
    c = rng.standard_normal(B)

    def f(leaves):
        out = mlp_tape(_layers(leaves), leaves[0].tape.const(x))
        return ad.sum(ad.mul(ad.reshape(out, (-1,)), c))

    return f, params


def _va_case(rng):
    B = int(rng.integers(2, 12))
    r = rng.standard_normal(B) * rng.uniform(0.3, 3)
    s = np.array(rng.uniform(-1.5, 1.5))
    return (lambda leaves: va_loss(ad.sub(leaves[0], 0.0), leaves[1])), [r, s]


def _dva_case(rng):
    B = int(rng.integers(2, 12))
    y = rng.standard_normal(B) * 2
    mu = y + rng.standard_normal(B)
    eps = rng.standard_normal(B)
    s3 = np.array(rng.uniform(-1.5, 1.0))
    s2 = np.array(rng.uniform(-1.5, 1.0))
    return (lambda leaves: dva_loss(y, leaves[0], leaves[1], leaves[2], mu)), [eps, s3, s2]


def _flow_case(rng):
    H = int(rng.integers(2, 6))
    params = [rng.standard_normal((H, 1)), rng.standard_normal(H), 0.5 * rng.standard_normal((1, H)) / np.sqrt(H),
              0.5 * rng.standard_normal(1)]
    B = int(rng.integers(1, 4))
    x = rng.uniform(-2, 2, B)
    c = rng.standard_normal(B)
    substeps = int(rng.integers(1, 4))

    def f(leaves):
        out = flow_on_tape(_layers(leaves[:4]), leaves[4], 0.1, substeps, fused=False)
        return ad.sum(ad.mul(out, c))

    return f, params + [x]


CASES = {"mlp": _mlp_case, "va": _va_case, "dva": _dva_case, "flow": _flow_case}


@dataclass
class FamilyReport:
    family: str
    configs: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_family(family: str, n: int = 100, seed=0) -> FamilyReport:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), list(CASES).index(family)]))
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n):
        f, point = CASES[family](rng)
        worst = max(worst, ad.grad_check(f, point, h=1e-5))
    return FamilyReport(family, n, float(worst), TOLERANCE[family], time.perf_counter() - t0)


def run_suite(n: int = 100, seed=0, families=None) -> list[FamilyReport]:
    return [run_family(fam, n, seed) for fam in (families or CASES)]
