"""Variance attenuation (VA) and denoising variance attenuation (DVA).

VA fits a positive variance head by the Gaussian NLL of the residuals of a
frozen predictor.  DVA additionally gives every training example a
normalised noise estimate ``eps_hat[i]`` and a noise-scale head, and fits
them jointly with the VA head; after each epoch the bank of ``eps_hat`` is
projected back onto zero mean / unit population variance, globally or per
input-ranked segment.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .models import (
    MlpParams,
    Predictor,
    TrainingAborted,
    abort_on_nonfinite,
    mlp_forward,
    mlp_init,
    mlp_tape,
    sample_functions,
    sample_mean,
)
from .optim import Adam, TrainConfig
from .synthdata import Dataset, ObservedData, observed

log = logging.getLogger(__name__)

LOGVAR_MIN = -20.0
LOGVAR_MAX = 20.0
CONSTRAINT_TOL = 1e-9


class DegenerateSegmentError(RuntimeError):
    """A segment of the noise bank has zero variance and cannot be normalised."""


class ConstraintViolation(RuntimeError):
    """The noise bank left the zero-mean / unit-variance set after normalisation."""


# ---------------------------------------------------------------------------
# variance heads


@dataclass
class VarianceHead:
    """Log-variance parameterisation: a scalar, or an MLP of the input."""

    kind: str
    log_var: np.ndarray | None = None
    net: MlpParams | None = None

    @classmethod
    def scalar(cls, log_var: float = 0.0) -> "VarianceHead":
        return cls("scalar", log_var=np.array(float(log_var)))

    @classmethod
    def network(cls, seed, hidden: int = 100) -> "VarianceHead":
        return cls("network", net=mlp_init([1, hidden, 1], seed))

    def params(self) -> dict[str, np.ndarray]:
        if self.kind == "scalar":
            return {"s": self.log_var}
        return self.net.as_dict()

    def copy(self) -> "VarianceHead":
        if self.kind == "scalar":
            return VarianceHead.scalar(float(self.log_var))
        return VarianceHead("network", net=self.net.copy())

    def on_tape(self, tape: ad.Tape, x: np.ndarray) -> tuple[list[ad.Var], ad.Var]:
        """Trainable leaves and the clamped log-variance at ``x``."""
        if self.kind == "scalar":
            leaf = tape.leaf(self.log_var)
            return [leaf], ad.clamp(leaf, LOGVAR_MIN, LOGVAR_MAX)
        names = list(self.net.as_dict())
        d = self.net.as_dict()
        leaves = [tape.leaf(d[k]) for k in names]
        out = mlp_tape(list(zip(leaves[0::2], leaves[1::2])), tape.const(x))
        return leaves, ad.clamp(out, LOGVAR_MIN, LOGVAR_MAX)

    def offset(self, log_var0: float) -> "VarianceHead":
        """Copy whose log-variance starts at ``log_var0`` (the output bias, for networks)."""
        head = self.copy()
        if head.kind == "scalar":
            head.log_var = np.array(float(log_var0))
        else:
            head.net.biases[-1][:] = log_var0
        return head

    def variance(self, x=None):
        """exp(log-variance); a float for scalar heads, an array over ``x`` otherwise."""
        if self.kind == "scalar":
            v = float(np.exp(np.clip(self.log_var, LOGVAR_MIN, LOGVAR_MAX)))
            return v if x is None else np.full(np.shape(x), v)
        if x is None:
            raise ValueError("network heads need inputs")
        return np.exp(np.clip(mlp_forward(self.net, x), LOGVAR_MIN, LOGVAR_MAX))

    def std(self, x=None):
        return np.sqrt(self.variance(x))


def residual_log_var(predictor: Predictor, data, rng) -> float:
    """Log of the mean squared residual under one predictive-mean draw, clamped to the head range."""
    data = observed(data)
    r = data.y - sample_mean(predictor, data.x, rng)
    return float(np.clip(np.log(max(np.mean(r * r), 1e-300)), LOGVAR_MIN, LOGVAR_MAX))


def make_head(kind: str, seed=0, hidden: int = 100) -> VarianceHead:
    if kind == "scalar":
        return VarianceHead.scalar()
    if kind == "network":
        return VarianceHead.network(seed, hidden)
    raise ValueError(f"unknown head kind {kind!r}")


# ---------------------------------------------------------------------------
# segmentation and normalisation


@dataclass
class Segmentation:
    """Rank examples by input and split the ranking into ``G`` equal-count blocks."""

    G: int
    assignment: np.ndarray
    blocks: list[np.ndarray] = field(repr=False)

    @classmethod
    def by_rank(cls, x, G: int = 1) -> "Segmentation":
        x = np.asarray(x, dtype=np.float64)
        if G < 1:
            raise ValueError("G must be >= 1")
        if len(x) < 2 * G:
            raise ValueError(f"{len(x)} examples cannot fill {G} segments of >= 2")
        order = np.argsort(x, kind="stable")
        blocks = [np.sort(b) for b in np.array_split(order, G)]
        assignment = np.empty(len(x), dtype=np.int64)
        for g, b in enumerate(blocks):
            assignment[b] = g
        return cls(G, assignment, blocks)

    @classmethod
    def from_assignment(cls, assignment) -> "Segmentation":
        assignment = np.asarray(assignment, dtype=np.int64)
        G = int(assignment.max()) + 1
        blocks = [np.flatnonzero(assignment == g) for g in range(G)]
        return cls(G, assignment, blocks)

    @property
    def M(self) -> int:
        return len(self.assignment)


def normalize(eps_hat, segmentation: Segmentation | None = None) -> np.ndarray:
    """Per-segment z-score with the population standard deviation."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    blocks = [np.arange(len(eps_hat))] if segmentation is None else segmentation.blocks
    out = np.empty_like(eps_hat)
    for g, b in enumerate(blocks):
        if len(b) < 2:
            raise DegenerateSegmentError(f"segment {g} has fewer than 2 elements")
        e = eps_hat[b]
        mu = e.mean()
        var = np.mean((e - mu) ** 2)
        if not var > 0.0:
            raise DegenerateSegmentError(f"segment {g} has zero variance")
        out[b] = (e - mu) / np.sqrt(var)
    return out


def constraint_violation(eps_hat, segmentation: Segmentation | None = None) -> float:
    """Largest per-segment ``|mean|`` or ``|pop-var - 1|``."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    blocks = [np.arange(len(eps_hat))] if segmentation is None else segmentation.blocks
    worst = 0.0
    for b in blocks:
        e = eps_hat[b]
        mu = e.mean()
        worst = max(worst, abs(mu), abs(np.mean((e - mu) ** 2) - 1.0))
    return float(worst)


# ---------------------------------------------------------------------------
# losses


def va_loss(residual, log_var):
    """Mean of r^2 / (2 var) + ln(var) / 2 with var = exp(log_var).

    Works on tape ``Var`` operands or plain arrays.
    """
    if isinstance(residual, ad.Var) or isinstance(log_var, ad.Var):
        terms = ad.add(ad.mul(ad.mul(ad.square(residual), ad.exp(ad.neg(log_var))), 0.5), ad.mul(log_var, 0.5))
        return ad.mean(terms)
    r = np.asarray(residual, dtype=np.float64)
    s = np.broadcast_to(np.asarray(log_var, dtype=np.float64), r.shape)
    return float(np.mean(0.5 * r * r * np.exp(-s) + 0.5 * s))


def dva_loss(y, eps_hat, noise_log_var, va_log_var, mu):
    """DVA objective on a batch: VA loss of the denoised residual ``y - eps_hat sigma - mu``."""
    if any(isinstance(v, ad.Var) for v in (eps_hat, noise_log_var, va_log_var)):
        sigma = ad.exp(ad.mul(noise_log_var, 0.5))
        resid = ad.sub(ad.sub(y, ad.mul(eps_hat, sigma)), mu)
        return va_loss(resid, va_log_var)
    sigma = np.exp(0.5 * np.asarray(noise_log_var, dtype=np.float64))
    resid = np.asarray(y) - np.asarray(eps_hat) * sigma - np.asarray(mu)
    return va_loss(resid, va_log_var)


# ---------------------------------------------------------------------------
# trainers


@dataclass
class DvaConfig(TrainConfig):
    """Training schedule plus DVA-specific knobs.

    ``segments`` is G (1 = global normalisation).  ``head`` selects scalar or
    network variance heads.  ``eps_moment`` picks how the Adam second moment
    of the noise bank is kept: ``"segment"`` (one running scale per
    normalisation segment, the default), ``"global"`` (one for the whole
    bank) or ``"entry"`` (textbook per-coordinate Adam).
    ``n_model_samples`` is the sampler size for input-noise denoising.
    ``head_init="residual"`` starts both label-noise heads at the log mean
    squared residual of the frozen predictor instead of log-variance 0.
    """

    segments: int = 1
    head: str = "scalar"
    hidden: int = 100
    eps_moment: str = "segment"
    n_model_samples: int | None = None
    head_init: str = "zero"

    def __post_init__(self):
        if self.head_init not in ("zero", "residual"):
            raise ValueError(f"head_init must be 'zero' or 'residual', got {self.head_init!r}")
        if self.eps_moment not in ("segment", "global", "entry"):
            raise ValueError(f"eps_moment must be 'segment', 'global' or 'entry', got {self.eps_moment!r}")


@dataclass
class DvaState:
    eps_hat: np.ndarray
    sigma_head: VarianceHead
    va_head: VarianceHead | None
    segmentation: Segmentation
    target: str = "label"
    history: dict = field(default_factory=lambda: {"loss": [], "constraint_violation": []})

    @property
    def M(self) -> int:
        return len(self.eps_hat)

    def noise_variance(self, x=None):
        """The aleatoric estimate: scalar for scalar heads, else evaluated at ``x``."""
        return self.sigma_head.variance(x)

    def noise_estimate(self, x) -> np.ndarray:
        """Per-example recovered noise ``eps_hat * sigma(x)``."""
        return self.eps_hat * self.sigma_head.std(np.asarray(x, dtype=np.float64))


class NoiseBankAdam:
    """Adam on the noise-bank entries touched by each minibatch.

    First moments and bias corrections are per entry, so untouched entries
    keep their state.  The second moment is one running mean of squared
    gradients per group of entries (``groups[i]`` is entry i's group; pass
    ``None`` for a single group), or per entry when ``per_entry=True``.

    Per-entry second moments turn each step into roughly ``lr * sign(g)``;
    combined with the per-epoch rescaling, every entry whose gradient keeps
    its sign then settles at the same magnitude, a clipped sign pattern
    that is not a stationary point of the constrained loss.  A scale shared
    by a group keeps steps proportional to the gradient.  Groups follow the
    normalisation segments: with input-dependent heads the loss curvature
    in each entry varies with x, and a single bank-wide scale lets the
    regions that converge first (large gradients) freeze the rest.
    """

    def __init__(self, n, groups=None, per_entry=False, beta1=0.9, beta2=0.999, eps=1e-8):
        self.per_entry = per_entry
        self.m = np.zeros(n)
        self.t = np.zeros(n, dtype=np.int64)
        if per_entry:
            self.groups = np.arange(n)
        elif groups is None:
            self.groups = np.zeros(n, dtype=np.int64)
        else:
            self.groups = np.asarray(groups, dtype=np.int64)
        n_groups = int(self.groups.max()) + 1 if n else 0
        self.v = np.zeros(n_groups)
        self.steps = np.zeros(n_groups, dtype=np.int64)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, p, idx, g, lr):
        b1, b2 = self.beta1, self.beta2
        self.t[idx] += 1
        t = self.t[idx]
        self.m[idx] = b1 * self.m[idx] + (1 - b1) * g
        mhat = self.m[idx] / (1 - b1**t)
        gid = self.groups[idx]
        if self.per_entry:
            self.v[gid] = b2 * self.v[gid] + (1 - b2) * g * g
            self.steps[gid] += 1
        else:
            ids, inv = np.unique(gid, return_inverse=True)
            sq = np.bincount(inv, weights=g * g) / np.bincount(inv)
            self.v[ids] = b2 * self.v[ids] + (1 - b2) * sq
            self.steps[ids] += 1
        vhat = self.v[gid] / (1 - b2 ** self.steps[gid])
        p[idx] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def _noise_bank_optimizer(state, config) -> NoiseBankAdam:
    if config.eps_moment == "entry":
        return NoiseBankAdam(state.M, per_entry=True)
    if config.eps_moment == "global":
        return NoiseBankAdam(state.M)
    return NoiseBankAdam(state.M, groups=state.segmentation.assignment)


def _finite(loss: ad.Var, what: str, epoch: int):
    if not np.isfinite(loss.value):
        raise TrainingAborted(f"{what}: non-finite loss at epoch {epoch}")


def _prefixed(prefix, d):
    return {f"{prefix}.{k}": v for k, v in d.items()}


@abort_on_nonfinite("va")
def va_train(predictor: Predictor, data, head: VarianceHead | None = None, config: TrainConfig | None = None, seed=0):
    """Fit a VA variance head against a frozen predictor; returns the trained head.

    The predictive mean is re-sampled for every minibatch.
    """
    data = observed(data)
    config = config or TrainConfig()
    head = (head or VarianceHead.scalar()).copy()
    rng = np.random.default_rng(seed)
    params = head.params()
    names = list(params)
    opt = Adam(params, lr=config.lr)
    x, y = data.x, data.y
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for idx in config.batches(len(x), rng):
            mu = sample_mean(predictor, x[idx], rng)
            tape = ad.Tape()
            leaves, s = head.on_tape(tape, x[idx])
            loss = va_loss(tape.const(y[idx] - mu), s)
            _finite(loss, "va", epoch)
            opt.step(dict(zip(names, tape.gradient(loss, leaves))), lr=lr)
    return head


def _init_state(data: ObservedData, config: DvaConfig, rng, with_va: bool, target: str, seg_x=None) -> DvaState:
    seg = Segmentation.by_rank(data.x if seg_x is None else seg_x, config.segments)
    eps = normalize(rng.standard_normal(len(data.x)), seg)
    head_seeds = rng.integers(0, 2**63, size=2)
    sigma_head = make_head(config.head, head_seeds[0], config.hidden)
    va_head = make_head(config.head, head_seeds[1], config.hidden) if with_va else None
    return DvaState(eps, sigma_head, va_head, seg, target)


def _after_epoch(state: DvaState, epoch_loss: float, callback):
    state.eps_hat = normalize(state.eps_hat, state.segmentation)
    viol = constraint_violation(state.eps_hat, state.segmentation)
    state.history["loss"].append(epoch_loss)
    state.history["constraint_violation"].append(viol)
    if viol > CONSTRAINT_TOL:
        raise ConstraintViolation(f"normalisation left a violation of {viol:.3e}")
    if callback is not None:
        callback(state)


@abort_on_nonfinite("dva")
def dva_train_label(
    predictor: Predictor,
    data,
    config: DvaConfig | None = None,
    seed=0,
    callback=None,
) -> DvaState:
    """Denoise labels: alternate Adam steps on (heads, batch eps_hat) with per-epoch normalisation."""
    data = observed(data)
    config = config or DvaConfig()
    rng = np.random.default_rng(seed)
    state = _init_state(data, config, rng, with_va=True, target="label")
    if config.head_init == "residual":
        s0 = residual_log_var(predictor, data, rng)
        state.sigma_head, state.va_head = state.sigma_head.offset(s0), state.va_head.offset(s0)
    p3 = _prefixed("sig", state.sigma_head.params())
    p2 = _prefixed("va", state.va_head.params())
    opt = Adam({**p3, **p2}, lr=config.lr)
    eps_opt = _noise_bank_optimizer(state, config)
    n3 = list(p3)
    n2 = list(p2)
    x, y = data.x, data.y
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total = 0.0
        batches = config.batches(len(x), rng)
        for idx in batches:
            mu = sample_mean(predictor, x[idx], rng)
            tape = ad.Tape()
            l3, s3 = state.sigma_head.on_tape(tape, x[idx])
            l2, s2 = state.va_head.on_tape(tape, x[idx])
            e = tape.leaf(state.eps_hat[idx])
            loss = dva_loss(y[idx], e, s3, s2, mu)
            _finite(loss, "dva", epoch)
            total += float(loss.value)
            grads = tape.gradient(loss, l3 + l2 + [e])
            opt.step(dict(zip(n3 + n2, grads[:-1])), lr=lr)
            eps_opt.step(state.eps_hat, idx, grads[-1], lr)
        _after_epoch(state, total / len(batches), callback)
    return state


@abort_on_nonfinite("dva-input")
def dva_train_input(
    predictor: Predictor,
    data,
    config: DvaConfig | None = None,
    seed=0,
    callback=None,
) -> DvaState:
    """Denoise inputs against clean labels with a scalar noise scale.

    Minimises the mean over the batch and over ``N`` sampled networks of
    ``(y - f(x_obs - eps_hat sigma))^2``; no VA head is involved.
    """
    data = observed(data)
    config = config or DvaConfig()
    if config.head != "scalar":
        raise ValueError("input denoising uses a scalar noise scale")
    rng = np.random.default_rng(seed)
    state = _init_state(data, config, rng, with_va=False, target="input")
    n_samples = config.n_model_samples
    if n_samples is None:
        n_samples = len(predictor.members) if hasattr(predictor, "members") else getattr(predictor, "n_samples", 1)
    p3 = _prefixed("sig", state.sigma_head.params())
    opt = Adam(dict(p3), lr=config.lr)
    eps_opt = _noise_bank_optimizer(state, config)
    n3 = list(p3)
    x, y = data.x, data.y
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        total = 0.0
        batches = config.batches(len(x), rng)
        for idx in batches:
            nets = sample_functions(predictor, n_samples, rng)
            tape = ad.Tape()
            l3, s3 = state.sigma_head.on_tape(tape, x[idx])
            e = tape.leaf(state.eps_hat[idx])
            sigma = ad.exp(ad.mul(s3, 0.5))
            u = ad.sub(x[idx], ad.mul(e, sigma))
            acc = None
            for net in nets:
                layers = [(tape.const(w), tape.const(b)) for w, b in zip(net.weights, net.biases)]
                term = ad.sum(ad.square(ad.sub(y[idx], mlp_tape(layers, u))))
                acc = term if acc is None else ad.add(acc, term)
            loss = ad.mul(acc, 1.0 / (len(idx) * len(nets)))
            _finite(loss, "dva-input", epoch)
            total += float(loss.value)
            grads = tape.gradient(loss, l3 + [e])
            opt.step(dict(zip(n3, grads[:-1])), lr=lr)
            eps_opt.step(state.eps_hat, idx, grads[-1], lr)
        _after_epoch(state, total / len(batches), callback)
    return state


def denoise(data, state: DvaState):
    """Subtract the recovered noise from labels (or inputs); the input object is not modified."""
    if isinstance(data, Dataset):
        x, n = data.x_obs, data.M
    else:
        data = observed(data)
        x, n = data.x, len(data.x)
    if n != state.M:
        raise ValueError(f"state holds {state.M} noise estimates but data has {n} examples")
    seg_x = x
    noise = state.noise_estimate(seg_x)
    if isinstance(data, Dataset):
        if state.target == "label":
            return data.with_labels(data.y_obs - noise)
        return data.with_inputs(data.x_obs - noise)
    if state.target == "label":
        return ObservedData(data.x, data.y - noise)
    return ObservedData(data.x - noise, data.y)


# ---------------------------------------------------------------------------
# checkpoints


def _head_arrays(prefix: str, head: VarianceHead | None) -> tuple[dict, dict]:
    if head is None:
        return {prefix: None}, {}
    meta = {prefix: head.kind}
    return meta, {f"{prefix}.{k}": v for k, v in head.params().items()}


def _head_from(prefix: str, kind, arrays) -> VarianceHead | None:
    if kind is None:
        return None
    sub = {k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
    if kind == "scalar":
        return VarianceHead("scalar", log_var=sub["s"])
    return VarianceHead("network", net=MlpParams.from_dict(sub))


def save_state(path, state: DvaState) -> None:
    """Write the noise bank, heads and segmentation to an ``.npz`` archive."""
    m3, a3 = _head_arrays("sigma_head", state.sigma_head)
    m2, a2 = _head_arrays("va_head", state.va_head)
    meta = {**m3, **m2, "target": state.target}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            __meta__=np.array(json.dumps(meta, sort_keys=True)),
            eps_hat=state.eps_hat,
            segmentation=state.segmentation.assignment,
            **a3,
            **a2,
        )


def load_state(path) -> DvaState:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return DvaState(
        arrays["eps_hat"],
        _head_from("sigma_head", meta["sigma_head"], arrays),
        _head_from("va_head", meta["va_head"], arrays),
        Segmentation.from_assignment(arrays["segmentation"]),
        meta["target"],
    )
