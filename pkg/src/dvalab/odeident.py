"""Vector-field identification from noisy 1-D trajectories, and noise recovery.

A vector field is trained on consecutive observation pairs by integrating
from one noisy observation to the next.  Because the same measurement noise
corrupts both the start of a step and its target, DVA here gives every
observation one noise estimate that is used in both roles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .models import (
    BayesMlp,
    FixedPredictor,
    MlpParams,
    TrainingAborted,
    abort_on_nonfinite,
    bayes_sample_on_tape,
    mlp_forward,
    mlp_tape,
    sample_functions,
)
from .optim import Adam
from .synthdata import TrajectorySet
from .uncertainty import (
    DvaConfig,
    DvaState,
    _noise_bank_optimizer,
    Segmentation,
    VarianceHead,
    _after_epoch,
    normalize,
    va_loss,
)

log = logging.getLogger(__name__)

VectorField = MlpParams | BayesMlp


class IntegrationError(ArithmeticError):
    """The integrated state stopped being finite."""


# ---------------------------------------------------------------------------
# integration


def _check_state(x, where: str):
    v = x.value if isinstance(x, ad.Var) else x
    if not np.all(np.isfinite(v)):
        raise IntegrationError(f"non-finite state in {where}")


def rk4_step(f, x, dt: float):
    """One classical Runge-Kutta step.

    ``f`` maps a state to its derivative.  With a tape ``Var`` state, ``f``
    must map ``Var`` to ``Var`` and the step is recorded on the tape.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_state(x, "rk4_step input")
    try:
        k1 = f(x)
        k2 = f(x + (0.5 * dt) * k1)
        k3 = f(x + (0.5 * dt) * k2)
        k4 = f(x + dt * k3)
        out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    except ad.NonFiniteError as exc:
        raise IntegrationError(str(exc)) from exc
    _check_state(out, "rk4_step output")
    return out


def one_step_flow(f, x, dt_obs: float = 0.1, substeps: int = 10):
    """``substeps`` RK4 steps of size ``dt_obs / substeps`` from ``x``."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    h = dt_obs / substeps
    for _ in range(substeps):
        x = rk4_step(f, x, h)
    return x


def field_fn(params: MlpParams):
    """Numpy right-hand side of a deterministic field."""
    return lambda z: mlp_forward(params, z)


def _fusable(widths) -> bool:
    return len(widths) == 3 and widths[0] == 1 and widths[2] == 1


def _kernel_args(params: MlpParams):
    w1 = np.ascontiguousarray(params.weights[0][:, 0])
    b1 = np.ascontiguousarray(params.biases[0])
    w2 = np.ascontiguousarray(params.weights[1][0])
    return w1, b1, w2, float(params.biases[1][0])


def flow_values(params, x, dt_obs=0.1, substeps=10, fused=True) -> np.ndarray:
    """Numpy flow of ``x`` through a deterministic field (an MLP or a known callable)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if not isinstance(params, MlpParams):
        return one_step_flow(params, x, dt_obs, substeps)
    if fused and _fusable(params.widths):
        out = kernels.flow_forward(x, *_kernel_args(params), dt_obs, substeps)
        _check_state(out, "flow")
        return out
    return one_step_flow(field_fn(params), x, dt_obs, substeps)


def flow_on_tape(layers: list[tuple[ad.Var, ad.Var]], x: ad.Var, dt_obs=0.1, substeps=10, fused=True) -> ad.Var:
    """Flow of tape state ``x`` through the field given by tape ``layers``.

    The fused path records one node whose reverse pass runs the compiled
    adjoint; the composed path unrolls every RK4 stage into primitives.
    """
    widths = [layers[0][0].value.shape[1]] + [w.value.shape[0] for w, _ in layers]
    if not (fused and _fusable(widths) and x.value.ndim == 1):
        return one_step_flow(lambda z: mlp_tape(layers, z), x, dt_obs, substeps)
    (w1v, b1v), (w2v, b2v) = layers
    w1 = np.ascontiguousarray(w1v.value[:, 0])
    b1 = np.ascontiguousarray(b1v.value)
    w2 = np.ascontiguousarray(w2v.value[0])
    b2 = float(b2v.value[0])
    xs = np.ascontiguousarray(x.value)
    out = kernels.flow_forward(xs, w1, b1, w2, b2, dt_obs, substeps)
    _check_state(out, "flow")

    def vjp(g):
        gx, gw1, gb1, gw2, gb2 = kernels.flow_vjp(xs, w1, b1, w2, b2, dt_obs, substeps, np.ascontiguousarray(g))
        return gx, gw1[:, None], gb1, gw2[None, :], np.array([gb2])

    return x.tape.record(out, (x, w1v, b1v, w2v, b2v), vjp, "flow")


def mean_flow_on_tape(nets: list[MlpParams], x: ad.Var, dt_obs=0.1, substeps=10, fused=True) -> ad.Var:
    """Average flow of ``x`` over frozen sampled fields, as one tape node."""
    xs = np.ascontiguousarray(x.value)
    val = np.zeros_like(xs)
    der = np.zeros_like(xs)
    for net in nets:
        if not isinstance(net, MlpParams):
            # known field: tangent by central difference of the flow
            v = one_step_flow(net, xs, dt_obs, substeps)
            h = 1e-6 * np.maximum(1.0, np.abs(xs))
            d = (one_step_flow(net, xs + h, dt_obs, substeps) - one_step_flow(net, xs - h, dt_obs, substeps)) / (2 * h)
        elif fused and _fusable(net.widths):
            v, d = kernels.flow_tangent(xs, *_kernel_args(net), dt_obs, substeps)
        else:
            t = ad.Tape()
            leaf = t.leaf(xs)
            layers = [(t.const(w), t.const(b)) for w, b in zip(net.weights, net.biases)]
            out = one_step_flow(lambda z: mlp_tape(layers, z), leaf, dt_obs, substeps)
            v = out.value
            # rows are independent, so the gradient of the sum is the diagonal tangent
            d = t.gradient(ad.sum(out), [leaf])[0]
        val += v
        der += d
    val /= len(nets)
    der /= len(nets)
    _check_state(val, "flow")
    return x.tape.record(val, (x,), lambda g: (g * der,), "mean_flow")


# ---------------------------------------------------------------------------
# field training


@dataclass
class OdeConfig(DvaConfig):
    """Training schedule plus integration settings.

    ``substeps`` RK4 steps bridge each ``dt_obs`` gap.  ``n_model_samples``
    fields are averaged for every mean prediction of a Bayesian field.
    ``fused`` routes the flow through the compiled kernels when the field
    has the ``[1, H, 1]`` shape.
    """

    dt_obs: float = 0.1
    substeps: int = 10
    n_model_samples: int | None = 5
    fused: bool = True


def _pairs(trajs: TrajectorySet):
    if len(trajs) == 0:
        raise ValueError("no trajectories")
    obs = trajs.observations()
    s, e = trajs.pairs()
    if len(s) == 0:
        raise ValueError("trajectories have no consecutive observation pairs")
    return obs, s, e


@abort_on_nonfinite("node")
def node_train(trajs: TrajectorySet, field: VectorField, config: OdeConfig | None = None, seed=0) -> VectorField:
    """Fit ``field`` so one flow step maps each observation onto the next.

    A deterministic field minimises the mean squared one-step error.  A
    :class:`BayesMlp` field minimises KL / num_batches plus half the summed
    squared error of the batch, as the Bayesian regressor does.
    """
    config = config or OdeConfig()
    obs, s, e = _pairs(trajs)
    rng = np.random.default_rng(seed)
    bayes = isinstance(field, BayesMlp)
    n_layers = len(field.mu.weights) if bayes else len(field.weights)
    if bayes:
        named = {**{"mu." + k: v for k, v in field.mu.copy().as_dict().items()},
                 **{"rho." + k: v for k, v in field.rho.copy().as_dict().items()}}
    else:
        named = field.copy().as_dict()
    names = list(named)
    opt = Adam(named, lr=config.lr)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        batches = config.batches(len(s), rng)
        for idx in batches:
            tape = ad.Tape()
            leaves = {k: tape.leaf(named[k]) for k in names}
            x0 = tape.const(obs[s[idx]])
            if bayes:
                mu_l = [(leaves[f"mu.W{i}"], leaves[f"mu.b{i}"]) for i in range(n_layers)]
                rho_l = [(leaves[f"rho.W{i}"], leaves[f"rho.b{i}"]) for i in range(n_layers)]
                layers, kl = bayes_sample_on_tape(tape, mu_l, rho_l, field.prior, rng)
            else:
                layers = [(leaves[f"W{i}"], leaves[f"b{i}"]) for i in range(n_layers)]
            try:
                pred = flow_on_tape(layers, x0, config.dt_obs, config.substeps, config.fused)
            except IntegrationError as exc:
                raise TrainingAborted(f"node: {exc} at epoch {epoch}") from exc
            err = ad.square(ad.sub(obs[e[idx]], pred))
            if bayes:
                loss = ad.add(ad.mul(kl, 1.0 / len(batches)), ad.mul(ad.sum(err), 0.5))
            else:
                loss = ad.mean(err)
            if not np.isfinite(loss.value):
                raise TrainingAborted(f"node: non-finite loss at epoch {epoch}")
            g = tape.gradient(loss, [leaves[k] for k in names])
            opt.step(dict(zip(names, g)), lr=lr)
    if bayes:
        mu_d = {k[3:]: named[k] for k in names if k.startswith("mu.")}
        rho_d = {k[4:]: named[k] for k in names if k.startswith("rho.")}
        return BayesMlp(MlpParams.from_dict(mu_d), MlpParams.from_dict(rho_d), field.prior, field.n_samples)
    return MlpParams.from_dict(named)


def _sampled_fields(field, n: int | None, rng) -> list:
    if isinstance(field, (MlpParams, FixedPredictor)):
        return [field]
    n = n or getattr(field, "n_samples", 5)
    return sample_functions(field, n, rng)


def mean_flow(field, x, config: OdeConfig | None = None, seed=0) -> np.ndarray:
    """Monte-Carlo mean of the one-step flow over sampled fields."""
    config = config or OdeConfig()
    rng = np.random.default_rng(seed)
    nets = _sampled_fields(field, config.n_model_samples, rng)
    return np.mean([flow_values(n, x, config.dt_obs, config.substeps, config.fused) for n in nets], axis=0)


def mse_noise_estimate(field, trajs: TrajectorySet, config: OdeConfig | None = None, seed=0) -> float:
    """Mean squared one-step residual of the mean field over all consecutive pairs."""
    obs, s, e = _pairs(trajs)
    r = obs[e] - mean_flow(field, obs[s], config, seed)
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# noise recovery


@dataclass
class OdeDvaState(DvaState):
    """Noise bank with one entry per observation, scalar heads, global normalisation."""


@abort_on_nonfinite("ode-dva")
def ode_dva(field, trajs: TrajectorySet, config: OdeConfig | None = None, seed=0, callback=None) -> OdeDvaState:
    """Recover observation noise against a frozen field.

    Each minibatch of pairs ``(k, k+1)`` contributes the VA loss of
    ``x[k+1] - e[k+1] s - flow(x[k] - e[k] s)``, with the flow averaged over
    freshly sampled fields.  An observation's noise estimate enters both as
    a target correction and as a start correction.
    """
    config = config or OdeConfig()
    if config.head != "scalar" or config.segments != 1:
        raise ValueError("trajectory denoising uses scalar heads and global normalisation")
    obs, s, e = _pairs(trajs)
    rng = np.random.default_rng(seed)
    seg = Segmentation.by_rank(obs, 1)
    state = OdeDvaState(normalize(rng.standard_normal(len(obs)), seg), VarianceHead.scalar(), VarianceHead.scalar(), seg,
                        target="trajectory")
    p3 = {"sig." + k: v for k, v in state.sigma_head.params().items()}
    p2 = {"va." + k: v for k, v in state.va_head.params().items()}
    opt = Adam({**p3, **p2}, lr=config.lr)
    eps_opt = _noise_bank_optimizer(state, config)
    names = list(p3) + list(p2)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total = 0.0
        batches = config.batches(len(s), rng)
        for idx in batches:
            nets = _sampled_fields(field, config.n_model_samples, rng)
            si, ei = s[idx], e[idx]
            touched, inv = np.unique(np.concatenate([si, ei]), return_inverse=True)
            tape = ad.Tape()
            l3, s3 = state.sigma_head.on_tape(tape, None)
            l2, s2 = state.va_head.on_tape(tape, None)
            bank = tape.leaf(state.eps_hat[touched])
            sigma = ad.exp(ad.mul(s3, 0.5))
            e_start = ad.take(bank, inv[: len(si)])
            e_end = ad.take(bank, inv[len(si):])
            start = ad.sub(obs[si], ad.mul(e_start, sigma))
            try:
                pred = mean_flow_on_tape(nets, start, config.dt_obs, config.substeps, config.fused)
            except IntegrationError as exc:
                raise TrainingAborted(f"ode-dva: {exc} at epoch {epoch}") from exc
            resid = ad.sub(ad.sub(obs[ei], ad.mul(e_end, sigma)), pred)
            loss = va_loss(resid, s2)
            if not np.isfinite(loss.value):
                raise TrainingAborted(f"ode-dva: non-finite loss at epoch {epoch}")
            total += float(loss.value)
            grads = tape.gradient(loss, l3 + l2 + [bank])
            opt.step(dict(zip(names, grads[:-1])), lr=lr)
            eps_opt.step(state.eps_hat, touched, grads[-1], lr)
        _after_epoch(state, total / len(batches), callback)
    return state
