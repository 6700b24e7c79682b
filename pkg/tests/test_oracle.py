import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvalab import oracle


def test_stationary_values_of_three_residuals():
    r = [1.0, -1.0, 2.0]
    assert oracle.va_stationary(r) == pytest.approx(2.0)
    assert oracle.dva_stationary(r) == pytest.approx(14.0 / 9.0)


def test_sample_variance_uses_unbiased_divisor():
    assert oracle.sample_noise_variance([1.0, -1.0]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        oracle.sample_noise_variance([1.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=40))
def test_va_exceeds_dva_by_squared_mean(r):
    r = np.array(r)
    assert oracle.va_stationary(r) - oracle.dva_stationary(r) == pytest.approx(r.mean() ** 2, abs=1e-8 * (1 + np.mean(r * r)))
    assert oracle.dva_stationary(r) >= -1e-9


def test_closed_form_point():
    r = np.array([0.5, 1.5, 3.0, -1.0])
    eps, sigma, va_var = oracle.dva_closed_form(r)
    assert abs(eps.mean()) < 1e-12 and np.mean(eps**2) == pytest.approx(1.0)
    assert sigma**2 == pytest.approx(oracle.dva_stationary(r))
    assert va_var == pytest.approx(r.mean() ** 2)
    with pytest.raises(ValueError):
        oracle.dva_closed_form([2.0, 2.0])


def test_closed_form_satisfies_first_order_conditions():
    rng = np.random.default_rng(0)
    y = rng.standard_normal(500) + 0.3
    mu = np.zeros(500)
    eps, sigma, va_var = oracle.dva_closed_form(y - mu)
    rep = oracle.kkt_residuals(y, mu, eps, sigma, va_var)
    assert rep.max_residual < 1e-10
    assert rep.lambda2 == 0.0
    assert rep.lambda1 == pytest.approx(sigma / va_var * 0.3, rel=0.5)


def test_perturbed_point_violates_conditions():
    rng = np.random.default_rng(1)
    y = rng.standard_normal(200) + 0.5
    eps, sigma, va_var = oracle.dva_closed_form(y)
    assert oracle.kkt_residuals(y, np.zeros(200), eps, 1.2 * sigma, va_var).max_residual > 1e-2


def test_kkt_input_validation():
    with pytest.raises(ValueError):
        oracle.kkt_residuals([1.0, 2.0], [0.0], [1.0, -1.0], 1.0, 1.0)
    with pytest.raises(ValueError):
        oracle.kkt_residuals([1.0, 2.0], [0.0, 0.0], [1.0, -1.0], 1.0, 0.0)


def test_constant_bias_expectations():
    rep = oracle.bias_report(1.0, lambda x: np.full_like(x, -0.5), M=10_000)
    assert rep.va_expected == pytest.approx(1.25)
    assert rep.dva_expected == pytest.approx(0.9999)


def test_linear_bias_expectations():
    # bias 0.1x with x ~ U[1, 9]: E[b^2] = 0.01 * (25 + 16/3), Var[b] = 0.01 * 16/3
    rep = oracle.bias_report(1.0, lambda x: 0.1 * x, M=10_000, mc_samples=400_000, seed=3)
    assert rep.va_expected == pytest.approx(1 + 0.01 * (25 + 16 / 3), abs=3 * rep.va_se + 1e-4)
    assert rep.dva_expected == pytest.approx(0.9999 * (1 + 0.01 * 16 / 3), abs=3 * rep.dva_se + 1e-4)


def test_ordering_holds_in_simulation():
    rep = oracle.bias_report(1.0, lambda x: np.full_like(x, 0.5), M=2000, replicates=200, seed=0)
    assert rep.sim_va - rep.sim_dva >= -3 * np.hypot(rep.sim_va_se, rep.sim_dva_se)
    assert rep.sim_va == pytest.approx(1.25, abs=4 * rep.sim_va_se)
    assert rep.sim_dva == pytest.approx(rep.dva_expected, abs=4 * rep.sim_dva_se)


def test_bias_report_is_seeded():
    a = oracle.bias_report(2.0, np.sin, seed=5).to_dict()
    b = oracle.bias_report(2.0, np.sin, seed=5).to_dict()
    assert a == b


def test_bias_report_accepts_input_sampler():
    rep = oracle.bias_report(0.0, lambda x: x, inputs=lambda rng, n: np.ones(n))
    assert rep.va_expected == pytest.approx(1.0) and rep.dva_expected == pytest.approx(0.0)


@pytest.mark.parametrize("kw", [dict(mc_samples=100), dict(M=1), dict(sigma2=-1.0)])
def test_bias_report_validation(kw):
    args = dict(sigma2=1.0, bias=np.sin)
    args.update(kw)
    with pytest.raises(ValueError):
        oracle.bias_report(**args)
