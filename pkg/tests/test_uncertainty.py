import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvalab import autodiff as ad
from dvalab import oracle
from dvalab import uncertainty as u
from dvalab.models import FixedPredictor, MlpParams, TrainingAborted
from dvalab.optim import TrainConfig
from dvalab.synthdata import NoiseSpec, ObservedData, gen_toy, target_fn

ZERO = FixedPredictor(lambda x: np.zeros_like(x))


def full_batch(epochs, lr=0.05, lr_final=1e-4):
    return TrainConfig(lr=lr, epochs=epochs, batch=None, lr_final=lr_final)


# -- losses ---------------------------------------------------------------------


@pytest.mark.parametrize("r,expected", [(0.0, 0.0), (1.0, 0.5)])
def test_va_loss_at_unit_variance(r, expected):
    assert u.va_loss(np.array([r]), 0.0) == expected


def test_va_loss_is_minimised_at_mean_square():
    r = np.array([1.0, -1.0, 2.0])
    best = u.va_loss(r, math.log(2.0))
    for v in (1.5, 1.9, 2.1, 3.0):
        assert u.va_loss(r, math.log(v)) > best


def test_tape_and_numpy_losses_agree():
    rng = np.random.default_rng(0)
    y, mu, e = rng.standard_normal((3, 8))
    t = ad.Tape()
    val = u.dva_loss(y, t.leaf(e), t.leaf(0.3), t.leaf(-0.2), mu).value
    assert float(val) == pytest.approx(u.dva_loss(y, e, 0.3, -0.2, mu), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=12), st.floats(-3, 3), st.floats(-3, 3))
def test_dva_loss_without_noise_estimates_is_va_loss(r, s3, s2):
    y = np.array(r)
    assert u.dva_loss(y, np.zeros_like(y), s3, s2, np.zeros_like(y)) == u.va_loss(y, s2)


def test_perfect_denoising_gives_zero_loss():
    assert u.dva_loss(np.array([3.0]), np.array([1.0]), math.log(9.0), 0.0, np.array([0.0])) == pytest.approx(0.0)


def test_dva_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    y, mu = rng.standard_normal(6) * 2, rng.standard_normal(6)
    pt = [rng.standard_normal(6), np.array(0.2), np.array(-0.4)]
    assert ad.grad_check(lambda v: u.dva_loss(y, v[0], v[1], v[2], mu), pt) < 1e-5


# -- normalisation ----------------------------------------------------------------


def test_normalize_global():
    np.testing.assert_allclose(u.normalize([1.0, 2.0, 3.0]), [-1.224744871391589, 0.0, 1.224744871391589])


def test_normalize_is_idempotent():
    e = u.normalize(np.random.default_rng(0).standard_normal(50))
    np.testing.assert_allclose(u.normalize(e), e, atol=1e-12)


def test_normalize_per_segment():
    seg = u.Segmentation.from_assignment([0, 0, 1, 1])
    np.testing.assert_allclose(u.normalize([1.0, 2.0, 10.0, 20.0], seg), [-1.0, 1.0, -1.0, 1.0])


def test_constant_segment_is_degenerate():
    with pytest.raises(u.DegenerateSegmentError):
        u.normalize([1.0, 1.0, 1.0])
    with pytest.raises(u.DegenerateSegmentError):
        u.normalize([1.0, 2.0, 3.0], u.Segmentation.from_assignment([0, 0, 1]))


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 200), st.integers(1, 6), st.integers(0, 2**32))
def test_segmentation_partitions_by_rank(M, G, seed):
    if M < 2 * G:
        return
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 9, M)
    seg = u.Segmentation.by_rank(x, G)
    sizes = [len(b) for b in seg.blocks]
    assert sum(sizes) == M and max(sizes) - min(sizes) <= 1
    assert sorted(np.concatenate(seg.blocks).tolist()) == list(range(M))
    for a, b in zip(seg.blocks[:-1], seg.blocks[1:]):
        assert x[a].max() <= x[b].min()
    e = u.normalize(rng.standard_normal(M), seg)
    assert u.constraint_violation(e, seg) <= 1e-9


def test_segmentation_rejects_too_many_segments():
    with pytest.raises(ValueError):
        u.Segmentation.by_rank(np.arange(5.0), 3)


# -- heads and optimiser ------------------------------------------------------------


def test_variance_head_is_positive_and_clamped():
    assert u.VarianceHead.scalar(-100.0).variance() == pytest.approx(math.exp(-20.0))
    head = u.VarianceHead.network(0, hidden=4)
    assert np.all(head.variance(np.linspace(1, 9, 5)) > 0)
    with pytest.raises(ValueError):
        head.variance()


def test_noise_bank_optimiser_touches_only_the_batch():
    p = np.arange(6.0)
    opt = u.NoiseBankAdam(6)
    opt.step(p, np.array([1, 4]), np.array([1.0, -2.0]), 0.1)
    np.testing.assert_array_equal(p[[0, 2, 3, 5]], [0.0, 2.0, 3.0, 5.0])
    assert p[1] < 1.0 and p[4] > 4.0


def test_shared_second_moment_keeps_steps_proportional():
    g = np.array([1.0, 2.0, 4.0])
    p = np.zeros(3)
    u.NoiseBankAdam(3).step(p, np.arange(3), g, 0.1)
    np.testing.assert_allclose(p / p[0], [1.0, 2.0, 4.0])
    q = np.zeros(3)
    u.NoiseBankAdam(3, per_entry=True).step(q, np.arange(3), g, 0.1)
    np.testing.assert_allclose(q, [-0.1, -0.1, -0.1], rtol=1e-6)


def test_grouped_second_moment_scales_each_group_separately():
    g = np.array([1.0, 1.0, 100.0, 100.0])
    p = np.zeros(4)
    u.NoiseBankAdam(4, groups=[0, 0, 1, 1]).step(p, np.arange(4), g, 0.1)
    np.testing.assert_allclose(p, [-0.1, -0.1, -0.1, -0.1], rtol=1e-6)
    q = np.zeros(4)
    u.NoiseBankAdam(4).step(q, np.arange(4), g, 0.1)
    assert abs(q[0]) < 0.02 * abs(q[2])


def test_dva_config_rejects_unknown_moment_mode():
    with pytest.raises(ValueError):
        u.DvaConfig(eps_moment="diagonal")


# -- trainers -------------------------------------------------------------------------


def test_va_head_converges_to_mean_square():
    data = ObservedData(np.array([1.0, 2.0, 3.0]), np.array([1.0, -1.0, 2.0]))
    head = u.va_train(ZERO, data, u.VarianceHead.scalar(), full_batch(2000))
    assert head.variance() == pytest.approx(2.0, rel=1e-3)


def test_va_variance_floors_on_zero_residuals():
    x = np.linspace(1, 9, 20)
    data = ObservedData(x, target_fn(x))
    head = u.va_train(FixedPredictor(target_fn), data, u.VarianceHead.scalar(), TrainConfig(lr=0.1, epochs=400, batch=None))
    assert head.variance() == pytest.approx(math.exp(u.LOGVAR_MIN))


def test_full_batch_dva_reaches_closed_form():
    d = gen_toy(200, NoiseSpec.from_variance(1.0), 0)
    mu = FixedPredictor(lambda x: target_fn(x) + 0.5)
    cfg = u.DvaConfig(lr=0.05, epochs=1500, batch=None, lr_final=1e-4)
    st_ = u.dva_train_label(mu, d.observed(), cfg, seed=0)
    r = d.y_obs - mu(d.x_obs)
    assert st_.noise_variance() == pytest.approx(oracle.dva_stationary(r), rel=1e-2)
    rep = oracle.kkt_residuals(d.y_obs, mu(d.x_obs), st_.eps_hat, float(st_.sigma_head.std()), float(st_.va_head.variance()))
    assert rep.max_residual < 1e-3


def test_constraint_holds_after_every_epoch():
    d = gen_toy(120, NoiseSpec("label", "hetero", 1.0), 1)
    seen = []
    cfg = u.DvaConfig(epochs=5, batch=32, segments=4, head="network", hidden=8)
    u.dva_train_label(FixedPredictor(target_fn), d.observed(), cfg, seed=0,
                      callback=lambda s: seen.append(u.constraint_violation(s.eps_hat, s.segmentation)))
    assert len(seen) == 5 and max(seen) <= 1e-9


def test_dva_training_is_deterministic():
    d = gen_toy(80, NoiseSpec.from_variance(1.0), 2)
    cfg = u.DvaConfig(epochs=3, batch=20)
    a = u.dva_train_label(FixedPredictor(target_fn), d.observed(), cfg, seed=4)
    b = u.dva_train_label(FixedPredictor(target_fn), d.observed(), cfg, seed=4)
    assert a.eps_hat.tobytes() == b.eps_hat.tobytes()


def test_input_denoising_finds_no_noise_for_exact_linear_model():
    x = np.linspace(1, 9, 100)
    linear = MlpParams([np.array([[2.0]])], [np.array([0.0])])
    # the gradient in the log-variance shrinks like the variance itself, so Adam needs many steps
    cfg = u.DvaConfig(lr=0.1, epochs=200, batch=10)
    st_ = u.dva_train_input(linear, ObservedData(x, 2 * x), cfg, seed=0)
    assert st_.noise_variance() < 1e-3


def test_input_denoising_needs_scalar_head():
    with pytest.raises(ValueError):
        u.dva_train_input(ZERO, ObservedData(np.arange(4.0), np.zeros(4)), u.DvaConfig(head="network"))


def test_nan_labels_abort_dva():
    data = ObservedData(np.arange(4.0), np.array([0.0, np.nan, 1.0, 2.0]))
    with pytest.raises(TrainingAborted):
        u.dva_train_label(ZERO, data, u.DvaConfig(epochs=1, batch=None))


# -- denoising and checkpoints ----------------------------------------------------------


def _state(eps, log_var, target="label"):
    seg = u.Segmentation.by_rank(np.arange(len(eps), dtype=float))
    return u.DvaState(np.asarray(eps, float), u.VarianceHead.scalar(log_var), u.VarianceHead.scalar(), seg, target)


def test_zero_noise_scale_leaves_data_unchanged():
    d = gen_toy(10, NoiseSpec.from_variance(1.0), 0)
    out = u.denoise(d, _state(np.ones(10), -1e3))
    np.testing.assert_allclose(out.y_obs, d.y_obs, atol=1e-4)


def test_exact_noise_estimates_recover_clean_labels():
    d = gen_toy(10, NoiseSpec.from_variance(4.0), 0)
    out = u.denoise(d, _state(d.eps / 2.0, math.log(4.0)))
    np.testing.assert_allclose(out.y_obs, d.y_clean, atol=1e-12)
    np.testing.assert_array_equal(d.y_obs, d.y_clean + d.eps)


def test_input_denoising_adjusts_inputs():
    d = gen_toy(10, NoiseSpec.from_variance(1.0, target="input"), 0)
    out = u.denoise(d, _state(d.xi, 0.0, target="input"))
    np.testing.assert_allclose(out.x_obs, d.x_clean, atol=1e-12)


def test_denoise_rejects_misaligned_state():
    d = gen_toy(10, NoiseSpec(), 0)
    with pytest.raises(ValueError):
        u.denoise(d, _state(np.ones(9), 0.0))


def test_trained_heteroscedastic_run_reduces_label_error():
    d = gen_toy(400, NoiseSpec("label", "hetero", 1.0), 3)
    cfg = u.DvaConfig(epochs=60, batch=50, segments=4, head="network", hidden=16)
    st_ = u.dva_train_label(FixedPredictor(target_fn), d.observed(), cfg, seed=1)
    out = u.denoise(d, st_)
    assert np.mean((out.y_obs - d.y_clean) ** 2) < np.mean(d.eps**2)


@pytest.mark.parametrize("head", ["scalar", "network"])
def test_state_checkpoint_round_trip(tmp_path, head):
    d = gen_toy(40, NoiseSpec.from_variance(1.0), 0)
    st_ = u.dva_train_label(ZERO, d.observed(), u.DvaConfig(epochs=2, batch=20, segments=2, head=head, hidden=4), seed=0)
    p = tmp_path / "state.npz"
    u.save_state(p, st_)
    back = u.load_state(p)
    assert back.eps_hat.tobytes() == st_.eps_hat.tobytes()
    np.testing.assert_array_equal(back.segmentation.assignment, st_.segmentation.assignment)
    for a, b in ((back.sigma_head, st_.sigma_head), (back.va_head, st_.va_head)):
        for k, v in b.params().items():
            assert a.params()[k].tobytes() == v.tobytes()
