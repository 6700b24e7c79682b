"""Closed-form and Monte-Carlo references for the variance estimators.

Everything here is straight-line arithmetic on arrays.  Nothing is imported
from the trainers, so a bug cannot be shared between an estimator and the
reference it is checked against.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

# Monte-Carlo draws live in their own seed namespace, apart from training seeds
_MC_STREAM = 0x0AC1E


def _mc_rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([_MC_STREAM, int(seed)]))


def _residuals(r) -> np.ndarray:
    return np.asarray(r, dtype=np.float64).ravel()


def va_stationary(residuals) -> float:
    """Optimal scalar VA variance: the mean squared residual."""
    r = _residuals(residuals)
    if r.size < 1:
        raise ValueError("need at least one residual")
    return float(np.mean(r * r))


def dva_stationary(residuals) -> float:
    """Optimal scalar DVA noise variance: mean square minus squared mean."""
    r = _residuals(residuals)
    if r.size < 2:
        raise ValueError("need at least two residuals")
    m = r.mean()
    return float(np.mean(r * r) - m * m)


def dva_closed_form(residuals) -> tuple[np.ndarray, float, float]:
    """Stationary DVA point ``(eps_hat, sigma_eps, va_var)`` for scalar heads.

    ``eps_hat`` is the z-scored residual, ``sigma_eps`` the population std of
    the residuals and ``va_var`` the squared residual mean left after
    denoising.
    """
    r = _residuals(residuals)
    sigma = float(np.sqrt(dva_stationary(r)))
    if sigma == 0.0:
        raise ValueError("constant residuals have no DVA noise direction")
    eps = (r - r.mean()) / sigma
    va_var = float(np.mean((r - eps * sigma) ** 2))
    return eps, sigma, va_var


def sample_noise_variance(draws) -> float:
    """Unbiased sample variance (divisor M - 1) of stored noise draws."""
    d = _residuals(draws)
    if d.size < 2:
        raise ValueError("need at least two draws")
    return float(np.var(d, ddof=1))


# ---------------------------------------------------------------------------
# expected bias


@dataclass
class BiasReport:
    """Expected stationary estimates under a known bias function.

    ``va_expected`` is noise variance plus the mean squared bias;
    ``dva_expected`` is (M-1)/M times noise variance plus the bias variance.
    The ``sim_*`` fields, present when replicates were requested, average
    the two closed forms over simulated training sets of size M.
    """

    sigma2: float
    M: int
    va_expected: float
    va_se: float
    dva_expected: float
    dva_se: float
    monte_carlo_samples: int
    replicates: int = 0
    sim_va: float | None = None
    sim_va_se: float | None = None
    sim_dva: float | None = None
    sim_dva_se: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform_sampler(domain):
    lo, hi = domain
    return lambda rng, n: lo + (hi - lo) * rng.random(n)


def bias_report(
    sigma2: float,
    bias: Callable[[np.ndarray], np.ndarray],
    inputs=(1.0, 9.0),
    M: int = 10_000,
    mc_samples: int = 100_000,
    replicates: int = 0,
    seed=0,
) -> BiasReport:
    """Monte-Carlo expectation of both stationary estimates.

    ``bias(x)`` is ``g(x) - mu(x)``.  ``inputs`` is either a ``(lo, hi)``
    uniform domain or a callable ``(rng, n) -> x``.
    """
    if mc_samples < 10_000:
        raise ValueError("mc_samples must be >= 1e4")
    if M < 2:
        raise ValueError("M must be >= 2")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    draw = inputs if callable(inputs) else _uniform_sampler(inputs)
    rng = _mc_rng(seed)
    b = np.asarray(bias(draw(rng, mc_samples)), dtype=np.float64)
    n = b.size
    sq = b * b
    va = sigma2 + sq.mean()
    va_se = sq.std(ddof=1) / np.sqrt(n)
    c = b - b.mean()
    shrink = (M - 1) / M
    dva = shrink * (sigma2 + np.mean(c * c))
    dva_se = shrink * (c * c).std(ddof=1) / np.sqrt(n)
    report = BiasReport(float(sigma2), M, float(va), float(va_se), float(dva), float(dva_se), n)
    if replicates > 0:
        vas, dvas = np.empty(replicates), np.empty(replicates)
        sd = np.sqrt(sigma2)
        for k in range(replicates):
            r = np.asarray(bias(draw(rng, M)), dtype=np.float64) + sd * rng.standard_normal(M)
            vas[k] = va_stationary(r)
            dvas[k] = dva_stationary(r)
        report.replicates = replicates
        report.sim_va = float(vas.mean())
        report.sim_dva = float(dvas.mean())
        if replicates > 1:
            report.sim_va_se = float(vas.std(ddof=1) / np.sqrt(replicates))
            report.sim_dva_se = float(dvas.std(ddof=1) / np.sqrt(replicates))
    return report


# ---------------------------------------------------------------------------
# first-order conditions of the constrained DVA problem


@dataclass
class KktResidualReport:
    """Residuals of the first-order conditions at a scalar-head DVA state.

    ``per_example`` is the max over examples of the stationarity condition
    in each noise estimate; ``noise_scale`` the mean-form stationarity in the
    noise scale; ``va_variance`` the gap between the VA variance and the
    mean squared denoised residual.
    """

    lambda1: float
    lambda2: float
    per_example: float
    noise_scale: float
    va_variance: float

    @property
    def max_residual(self) -> float:
        return max(self.per_example, self.noise_scale, self.va_variance)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["max_residual"] = self.max_residual
        return d


def kkt_residuals(y, mu, eps_hat, sigma_eps: float, va_var: float) -> KktResidualReport:
    """Evaluate the conditions at ``(eps_hat, sigma_eps, va_var)``.

    The first multiplier comes from summing the per-example conditions;
    the second is zero, which follows from the unit-variance constraint
    together with the noise-scale condition.
    """
    y = _residuals(y)
    mu = _residuals(mu)
    e = _residuals(eps_hat)
    if not (y.size == mu.size == e.size):
        raise ValueError("y, mu and eps_hat must have the same length")
    if va_var <= 0:
        raise ValueError("va_var must be positive")
    M = y.size
    r = y - mu
    d = r - e * sigma_eps
    lam1 = sigma_eps / va_var * r.sum() / M
    lam2 = 0.0
    per_example = np.max(np.abs(-d * sigma_eps / va_var + lam1 + 2 * lam2 * e))
    noise_scale = abs(np.sum(-d * e / va_var) / M)
    va_gap = abs(np.mean(d * d) - va_var)
    return KktResidualReport(float(lam1), lam2, float(per_example), float(noise_scale), float(va_gap))
