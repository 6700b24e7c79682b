import math

import numpy as np
import pytest

from dvalab import autodiff as ad
from dvalab import odeident as od
from dvalab.models import FixedPredictor, MlpParams, TrainingAborted, bayes_init, mlp_init
from dvalab.synthdata import NoiseSpec, Trajectory, TrajectorySet, gen_trajectories, toy_field
from dvalab.uncertainty import va_loss

GROWTH = lambda x: x  # noqa: E731


def _traj_set(*series, dt=0.1):
    out = []
    for xs in series:
        xs = np.asarray(xs, dtype=np.float64)
        t = np.arange(len(xs)) * dt
        out.append(Trajectory(t, xs.copy(), xs.copy(), np.zeros_like(xs)))
    return TrajectorySet(out, dt)


# -- integration ----------------------------------------------------------------


def test_zero_field_leaves_state_unchanged():
    x = np.array([0.3, -2.0, 7.0])
    assert np.array_equal(od.rk4_step(np.zeros_like, x, 0.1), x)


def test_rk4_step_on_exponential_growth():
    assert od.rk4_step(GROWTH, np.array([1.0]), 0.1)[0] == pytest.approx(1.10517083, abs=1e-7)


def test_rk4_global_error_has_order_four():
    steps = np.array([0.1, 0.05, 0.025, 0.0125])
    errors = []
    for h in steps:
        x = np.array([1.0])
        for _ in range(int(round(1.0 / h))):
            x = od.rk4_step(GROWTH, x, h)
        errors.append(abs(x[0] - math.e))
    slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
    assert slope == pytest.approx(4.0, abs=0.3)


@pytest.mark.parametrize("dt", [0.0, -0.1])
def test_rk4_rejects_non_positive_step(dt):
    with pytest.raises(ValueError):
        od.rk4_step(GROWTH, np.array([1.0]), dt)


def test_non_finite_state_raises_integration_error():
    with pytest.raises(od.IntegrationError):
        od.rk4_step(GROWTH, np.array([np.nan]), 0.1)
    with pytest.raises(od.IntegrationError), np.errstate(over="ignore"):
        od.one_step_flow(lambda x: x ** 2, np.array([1e200]), 0.1, 2)


def test_single_substep_matches_one_rk4_step():
    x = np.linspace(-1, 3, 7)
    assert np.array_equal(od.one_step_flow(toy_field, x, 0.1, 1), od.rk4_step(toy_field, x, 0.1))


def test_one_step_flow_rejects_zero_substeps():
    with pytest.raises(ValueError):
        od.one_step_flow(toy_field, np.array([1.0]), 0.1, 0)


def test_ten_substeps_match_fine_reference():
    x = np.array([2.0])
    fine = od.one_step_flow(toy_field, x, 0.1, 1000)
    assert abs(od.one_step_flow(toy_field, x, 0.1, 10)[0] - fine[0]) < 1e-5


def test_flow_parameter_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    H = 6
    params = [rng.standard_normal((H, 1)), rng.standard_normal(H), 0.3 * rng.standard_normal((1, H)), np.array([0.2])]
    x = np.array([0.5, 1.5, -0.7])
    c = rng.standard_normal(3)

    def f(leaves):
        layers = [(leaves[0], leaves[1]), (leaves[2], leaves[3])]
        out = od.flow_on_tape(layers, leaves[0].tape.const(x), 0.1, 10, fused=False)
        return ad.sum(ad.mul(out, c))

    assert ad.grad_check(f, params, h=1e-5) < 1e-4


def test_fused_and_composed_flows_agree():
    net = mlp_init([1, 8, 1], 2)
    x = np.linspace(-2, 2, 9)
    a = od.flow_values(net, x, fused=True)
    b = od.flow_values(net, x, fused=False)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-12)

    grads = []
    for fused in (True, False):
        tape = ad.Tape()
        layers = [(tape.leaf(w), tape.leaf(b)) for w, b in zip(net.weights, net.biases)]
        xv = tape.leaf(x)
        out = od.flow_on_tape(layers, xv, fused=fused)
        flat = [v for pair in layers for v in pair] + [xv]
        grads.append(tape.gradient(ad.sum(ad.square(out)), flat))
    for ga, gb in zip(*grads):
        assert np.allclose(ga, gb, rtol=1e-9, atol=1e-12)


def test_mean_flow_tangent_matches_finite_differences():
    x = np.array([0.4, 2.0, 5.0])
    for net in (mlp_init([1, 5, 1], 1), mlp_init([1, 4, 4, 1], 1), FixedPredictor(toy_field)):
        def f(leaves, net=net):
            return ad.sum(od.mean_flow_on_tape([net], leaves[0]))

        assert ad.grad_check(f, [x], h=1e-5) < 1e-4


# -- field training ----------------------------------------------------------------


def test_zero_epochs_leave_field_unchanged():
    trajs = _traj_set([1.0, 1.1, 1.2])
    net = mlp_init([1, 4, 1], 0)
    out = od.node_train(trajs, net, od.OdeConfig(epochs=0))
    for a, b in zip(net.weights + net.biases, out.weights + out.biases):
        assert np.array_equal(a, b)


def test_node_train_requires_trajectories():
    with pytest.raises(ValueError):
        od.node_train(TrajectorySet([]), mlp_init([1, 4, 1], 0))
    with pytest.raises(ValueError):
        od.node_train(_traj_set([1.0]), mlp_init([1, 4, 1], 0))


def test_node_train_aborts_on_nan_observation():
    trajs = _traj_set([1.0, np.nan, 1.2])
    with pytest.raises(TrainingAborted):
        od.node_train(trajs, mlp_init([1, 4, 1], 0), od.OdeConfig(epochs=2, batch=None))


@pytest.fixture(scope="module")
def noiseless_fit():
    trajs = gen_trajectories(40, seed=1)
    cfg = od.OdeConfig(lr=0.01, epochs=200, batch=100, lr_final=1e-4, decay_from=0.75)
    return trajs, od.node_train(trajs, mlp_init([1, 50, 1], 0), cfg, seed=0)


def test_noiseless_training_fits_one_step_map(noiseless_fit):
    trajs, field = noiseless_fit
    assert od.mse_noise_estimate(field, trajs) < 1e-3


def test_noiseless_training_recovers_vector_field(noiseless_fit):
    _, field = noiseless_fit
    xs = np.linspace(1, 9, 201)
    truth = toy_field(xs)
    rel = np.sqrt(np.mean((field(xs) - truth) ** 2)) / np.sqrt(np.mean(truth ** 2))
    assert rel < 0.10


def test_bayesian_field_training_runs():
    trajs = gen_trajectories(3, horizon=0.5, seed=0)
    field = od.node_train(trajs, bayes_init([1, 6, 1], 0), od.OdeConfig(epochs=2, batch=None))
    assert all(np.isfinite(w).all() for w in field.mu.weights)
    assert np.isfinite(od.mse_noise_estimate(field, trajs))


def test_mse_estimate_is_zero_for_exact_field_without_noise():
    trajs = gen_trajectories(5, horizon=1.0, seed=2)
    # observations use 100 RK4 steps per gap and the flow 10, so only discretisation error remains
    assert od.mse_noise_estimate(FixedPredictor(toy_field), trajs) < 1e-12


def test_mse_estimate_matches_manual_residuals():
    trajs = _traj_set([1.0, 1.2, 1.3], [2.0, 2.5])
    est = od.mse_noise_estimate(FixedPredictor(GROWTH), trajs)
    g = math.exp(0.1)
    expected = np.mean([(1.2 - g) ** 2, (1.3 - 1.2 * g) ** 2, (2.5 - 2 * g) ** 2])
    assert est == pytest.approx(expected, rel=1e-9)


# -- noise recovery ----------------------------------------------------------------


def test_ode_dva_rejects_network_heads():
    trajs = _traj_set([1.0, 1.1, 1.2])
    with pytest.raises(ValueError):
        od.ode_dva(FixedPredictor(toy_field), trajs, od.OdeConfig(head="network"))


def test_shared_noise_entry_collects_both_pair_terms():
    """The middle observation ends the first pair and starts the second."""
    obs = np.array([1.0, 1.3, 1.5])
    eps = np.array([0.2, -0.4, 0.7])
    sigma = 0.6
    net = mlp_init([1, 5, 1], 3)

    def pair_loss(leaves, pairs):
        bank = leaves[0]
        s, e = np.array(pairs).T
        start = ad.sub(obs[s], ad.mul(ad.take(bank, s), sigma))
        pred = od.mean_flow_on_tape([net], start)
        resid = ad.sub(ad.sub(obs[e], ad.mul(ad.take(bank, e), sigma)), pred)
        return ad.mul(va_loss(resid, bank.tape.const(np.array(0.3))), float(len(s)))

    def grad(pairs):
        tape = ad.Tape()
        leaf = tape.leaf(eps)
        return tape.gradient(pair_loss([leaf], pairs), [leaf])[0]

    both = grad([(0, 1), (1, 2)])
    first, second = grad([(0, 1)]), grad([(1, 2)])
    assert first[1] != 0 and second[1] != 0
    assert both[1] == pytest.approx(first[1] + second[1], rel=1e-12)
    assert first[2] == 0 and second[0] == 0
    assert ad.grad_check(lambda leaves: pair_loss(leaves, [(0, 1), (1, 2)]), [eps]) < 1e-5


def test_ode_dva_keeps_normalised_noise_bank():
    trajs = gen_trajectories(4, horizon=1.0, noise=NoiseSpec.from_variance(0.5), seed=5)
    st = od.ode_dva(FixedPredictor(toy_field), trajs, od.OdeConfig(epochs=3, batch=10), seed=1)
    assert len(st.eps_hat) == trajs.n_points
    assert abs(st.eps_hat.mean()) < 1e-9
    assert st.eps_hat.std() == pytest.approx(1.0, rel=1e-9)


def test_ode_dva_is_deterministic():
    trajs = gen_trajectories(3, horizon=1.0, noise=NoiseSpec.from_variance(1.0), seed=5)
    cfg = od.OdeConfig(epochs=3, batch=10)
    a = od.ode_dva(FixedPredictor(toy_field), trajs, cfg, seed=7)
    b = od.ode_dva(FixedPredictor(toy_field), trajs, cfg, seed=7)
    assert np.array_equal(a.eps_hat, b.eps_hat)
    assert a.noise_variance() == b.noise_variance()


def test_ode_dva_with_true_field_recovers_noise():
    trajs = gen_trajectories(20, noise=NoiseSpec.from_variance(1.0), seed=3)
    cfg = od.OdeConfig(lr=0.01, epochs=300, batch=100, lr_final=1e-4, decay_from=0.75)
    st = od.ode_dva(FixedPredictor(toy_field), trajs, cfg, seed=0)
    assert st.noise_variance() == pytest.approx(1.0, rel=0.25)
    assert st.noise_variance() == pytest.approx(np.var(trajs.noise()), rel=0.25)
