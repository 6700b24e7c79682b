"""Stochastic predictors: deterministic MLPs, deep ensembles and Bayes-by-backprop MLPs.

Every predictor answers the same questions: a Monte-Carlo predictive mean and
variance (:func:`predict`), one fresh draw of that mean for a minibatch
(:func:`sample_mean`), and a list of sampled deterministic networks
(:func:`sample_functions`) for algorithms that differentiate through the
model itself.
"""

from __future__ import annotations

import json
import logging
import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .optim import Adam, TrainConfig

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when a loss becomes NaN/inf during training."""


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class MlpParams:
    """Dense tanh network; the output layer is linear."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def as_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    @classmethod
    def from_dict(cls, d: dict[str, np.ndarray]) -> "MlpParams":
        n = len(d) // 2
        return cls([np.asarray(d[f"W{i}"]) for i in range(n)], [np.asarray(d[f"b{i}"]) for i in range(n)])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x) -> np.ndarray:
        return mlp_forward(self, x)


@dataclass
class Ensemble:
    members: list[MlpParams]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an ensemble needs at least 2 members")


@dataclass
class ScaleMixturePrior:
    pi: float = 0.5
    sigma1: float = 1.0
    sigma2: float = math.exp(-6.0)


@dataclass
class BayesMlp:
    """Factorised Gaussian posterior over MLP weights, std = softplus(rho)."""

    mu: MlpParams
    rho: MlpParams
    prior: ScaleMixturePrior = field(default_factory=ScaleMixturePrior)
    n_samples: int = 5

    @property
    def widths(self) -> list[int]:
        return self.mu.widths

    def sigma(self) -> MlpParams:
        return MlpParams(
            [np.logaddexp(0.0, r) for r in self.rho.weights],
            [np.logaddexp(0.0, r) for r in self.rho.biases],
        )

    def sample(self, rng: np.random.Generator) -> MlpParams:
        s = self.sigma()
        ws = [m + sd * rng.standard_normal(m.shape) for m, sd in zip(self.mu.weights, s.weights)]
        bs = [m + sd * rng.standard_normal(m.shape) for m, sd in zip(self.mu.biases, s.biases)]
        return MlpParams(ws, bs)


@dataclass
class FixedPredictor:
    """Wraps a known mean function; zero epistemic variance."""

    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


Predictor = Union[MlpParams, Ensemble, BayesMlp, FixedPredictor]


@dataclass
class Prediction:
    mean: np.ndarray
    epistemic_var: np.ndarray
    n_samples: int


# ---------------------------------------------------------------------------
# construction and forward passes


def mlp_init(widths, seed) -> MlpParams:
    """Weights and biases ~ N(0, 1) / sqrt(fan_in) from a seeded stream."""
    widths = list(widths)
    if len(widths) < 2:
        raise ValueError("widths needs at least input and output sizes")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = 1.0 / math.sqrt(fan_in)
        ws.append(rng.standard_normal((fan_out, fan_in)) * scale)
        bs.append(rng.standard_normal(fan_out) * scale)
    return MlpParams(ws, bs)


def bayes_init(widths, seed, rho0: float = -5.0, prior: ScaleMixturePrior | None = None) -> BayesMlp:
    mu = mlp_init(widths, seed)
    rho = MlpParams([np.full_like(w, rho0) for w in mu.weights], [np.full_like(b, rho0) for b in mu.biases])
    return BayesMlp(mu, rho, prior or ScaleMixturePrior())


def _as_rows(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None], True
    return x, False


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Numpy forward pass.  1-D ``x`` is a batch of scalar inputs."""
    h, squeeze = _as_rows(x)
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
    if squeeze and h.shape[1] == 1:
        return h[:, 0]
    return h


def mlp_tape(layers: list[tuple[ad.Var, ad.Var]], x: ad.Var) -> ad.Var:
    """Forward pass on a tape; ``x`` has shape ``(B,)`` (scalar inputs) or ``(B, n)``."""
    squeeze = x.value.ndim == 1
    h = ad.reshape(x, (-1, 1)) if squeeze else x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matvec(w, h), b)
        if i < last:
            h = ad.tanh(h)
    if squeeze and h.value.shape[1] == 1:
        h = ad.reshape(h, (-1,))
    return h


def params_on_tape(tape: ad.Tape, params: MlpParams, trainable=True) -> list[tuple[ad.Var, ad.Var]]:
    return [(tape.leaf(w, trainable), tape.leaf(b, trainable)) for w, b in zip(params.weights, params.biases)]


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_functions(model: Predictor, n: int, rng) -> list[MlpParams]:
    """``n`` deterministic networks drawn from the predictor (members cycle for ensembles)."""
    rng = _rng(rng)
    if isinstance(model, MlpParams):
        return [model] * n
    if isinstance(model, Ensemble):
        k = len(model.members)
        return [model.members[i % k] for i in range(n)]
    if isinstance(model, BayesMlp):
        return [model.sample(rng) for _ in range(n)]
    raise TypeError(f"cannot sample networks from {type(model).__name__}")


def predict(model: Predictor, x, n_samples: int | None = None, seed=None) -> Prediction:
    """Monte-Carlo predictive mean and population variance of sampled forward passes."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, FixedPredictor):
        m = model(x)
        return Prediction(m, np.zeros_like(m), 1)
    if isinstance(model, MlpParams):
        m = mlp_forward(model, x)
        return Prediction(m, np.zeros_like(m), 1)
    if isinstance(model, Ensemble):
        outs = np.stack([mlp_forward(p, x) for p in model.members])
    elif isinstance(model, BayesMlp):
        n = model.n_samples if n_samples is None else n_samples
        if n < 1:
            raise ValueError("n_samples must be >= 1")
        rng = _rng(seed)
        outs = np.stack([mlp_forward(model.sample(rng), x) for _ in range(n)])
    else:
        raise TypeError(f"unknown predictor {type(model).__name__}")
    # centre on the first draw so identical draws give exactly zero spread
    dev = outs - outs[0]
    shift = dev.mean(axis=0)
    mean = outs[0] + shift
    var = ((dev - shift) ** 2).mean(axis=0)
    return Prediction(mean, var, outs.shape[0])


def sample_mean(model: Predictor, x, rng) -> np.ndarray:
    """One fresh Monte-Carlo draw of the predictive mean at ``x``."""
    return predict(model, x, seed=_rng(rng)).mean


# ---------------------------------------------------------------------------
# Bayes-by-backprop objective


def bayes_sample_on_tape(
    tape: ad.Tape, mu: list[tuple[ad.Var, ad.Var]], rho: list[tuple[ad.Var, ad.Var]], prior: ScaleMixturePrior, rng
) -> tuple[list[tuple[ad.Var, ad.Var]], ad.Var]:
    """Reparameterised weight draw and the single-sample estimate of log q(w) - log p(w)."""
    c1 = prior.pi / (prior.sigma1 * math.sqrt(2 * math.pi))
    c2 = (1 - prior.pi) / (prior.sigma2 * math.sqrt(2 * math.pi))
    k1 = -0.5 / prior.sigma1**2
    k2 = -0.5 / prior.sigma2**2
    layers = []
    kl = None
    for (mw, mb), (rw, rb) in zip(mu, rho):
        pair = []
        for m, r in ((mw, rw), (mb, rb)):
            zeta = rng.standard_normal(m.value.shape)
            sd = ad.softplus(r)
            w = ad.add(m, ad.mul(sd, zeta))
            log_q = ad.neg(ad.sum(ad.ln(sd))) - (0.5 * float(np.sum(zeta * zeta)) + 0.5 * zeta.size * ad.LOG_2PI)
            w2 = ad.square(w)
            mix = ad.add(ad.mul(ad.exp(ad.mul(w2, k1)), c1), ad.mul(ad.exp(ad.mul(w2, k2)), c2))
            log_p = ad.sum(ad.ln(mix))
            term = ad.sub(log_q, log_p)
            kl = term if kl is None else ad.add(kl, term)
            pair.append(w)
        layers.append((pair[0], pair[1]))
    return layers, kl


# ---------------------------------------------------------------------------
# training


def abort_on_nonfinite(what: str):
    """Decorator: a non-finite tape value inside a trainer becomes :class:`TrainingAborted`."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except ad.NonFiniteError as exc:
                raise TrainingAborted(f"{what}: {exc}") from exc

        return inner

    return wrap


def _check(loss: ad.Var, what: str, epoch: int):
    if not np.isfinite(loss.value):
        raise TrainingAborted(f"{what}: non-finite loss at epoch {epoch}")


@abort_on_nonfinite("mlp")
def _train_mlp(params: MlpParams, x, y, config: TrainConfig, rng) -> MlpParams:
    params = params.copy()
    named = params.as_dict()
    opt = Adam(named, lr=config.lr)
    names = list(named)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for idx in config.batches(len(x), rng):
            tape = ad.Tape()
            leaves = [tape.leaf(named[k]) for k in names]
            layers = list(zip(leaves[0::2], leaves[1::2]))
            pred = mlp_tape(layers, tape.const(x[idx]))
            loss = ad.mean(ad.square(ad.sub(pred, y[idx])))
            _check(loss, "mlp", epoch)
            g = tape.gradient(loss, leaves)
            opt.step(dict(zip(names, g)), lr=lr)
    return MlpParams.from_dict(named)


@abort_on_nonfinite("bayes")
def _train_bayes(model: BayesMlp, x, y, config: TrainConfig, rng) -> BayesMlp:
    mu, rho = model.mu.copy(), model.rho.copy()
    named = {**{"mu." + k: v for k, v in mu.as_dict().items()}, **{"rho." + k: v for k, v in rho.as_dict().items()}}
    opt = Adam(named, lr=config.lr)
    names = list(named)
    n_layers = len(mu.weights)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        batches = config.batches(len(x), rng)
        for idx in batches:
            tape = ad.Tape()
            leaves = {k: tape.leaf(named[k]) for k in names}
            mu_l = [(leaves[f"mu.W{i}"], leaves[f"mu.b{i}"]) for i in range(n_layers)]
            rho_l = [(leaves[f"rho.W{i}"], leaves[f"rho.b{i}"]) for i in range(n_layers)]
            layers, kl = bayes_sample_on_tape(tape, mu_l, rho_l, model.prior, rng)
            pred = mlp_tape(layers, tape.const(x[idx]))
            nll = ad.mul(ad.sum(ad.square(ad.sub(pred, y[idx]))), 0.5)
            loss = ad.add(ad.mul(kl, 1.0 / len(batches)), nll)
            _check(loss, "bayes", epoch)
            g = tape.gradient(loss, [leaves[k] for k in names])
            opt.step(dict(zip(names, g)), lr=lr)
    n = n_layers
    mu_d = {k[3:]: named[k] for k in names if k.startswith("mu.")}
    rho_d = {k[4:]: named[k] for k in names if k.startswith("rho.")}
    assert len(mu_d) == 2 * n
    return BayesMlp(MlpParams.from_dict(mu_d), MlpParams.from_dict(rho_d), model.prior, model.n_samples)


def train_predictor(model: Predictor, data, config: TrainConfig | None = None, seed=0) -> Predictor:
    """Fit ``model`` to ``data.x`` / ``data.y`` and return the trained copy.

    Deterministic nets and ensemble members minimise minibatch MSE; a
    :class:`BayesMlp` minimises the minibatch ELBO (KL / num_batches plus
    the unit-variance Gaussian NLL of the batch).
    """
    config = config or TrainConfig()
    x = np.asarray(data.x, dtype=np.float64)
    y = np.asarray(data.y, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    ss = np.random.SeedSequence(_seed_int(seed))
    if isinstance(model, MlpParams):
        return _train_mlp(model, x, y, config, np.random.default_rng(ss))
    if isinstance(model, Ensemble):
        rngs = [np.random.default_rng(s) for s in ss.spawn(len(model.members))]
        return Ensemble([_train_mlp(m, x, y, config, r) for m, r in zip(model.members, rngs)])
    if isinstance(model, BayesMlp):
        return _train_bayes(model, x, y, config, np.random.default_rng(ss))
    raise TypeError(f"cannot train {type(model).__name__}")


def _seed_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed) & ((1 << 64) - 1)
    raise TypeError("seed must be an integer")


def make_predictor(kind: str, seed: int, hidden: int = 100, ensemble_size: int = 5, in_dim: int = 1, out_dim: int = 1):
    """Fresh untrained predictor of the named kind (``mlp``, ``ensemble`` or ``bnn``)."""
    widths = [in_dim, hidden, out_dim]
    ss = np.random.SeedSequence(seed)
    if kind == "mlp":
        return mlp_init(widths, ss)
    if kind == "ensemble":
        return Ensemble([mlp_init(widths, s) for s in ss.spawn(ensemble_size)])
    if kind == "bnn":
        return bayes_init(widths, ss)
    raise ValueError(f"unknown predictor kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints


def _flatten(model: Predictor) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(model, MlpParams):
        return {"kind": "mlp"}, dict(model.as_dict())
    if isinstance(model, Ensemble):
        arrays = {}
        for i, m in enumerate(model.members):
            for k, v in m.as_dict().items():
                arrays[f"m{i}.{k}"] = v
        return {"kind": "ensemble", "members": len(model.members)}, arrays
    if isinstance(model, BayesMlp):
        arrays = {f"mu.{k}": v for k, v in model.mu.as_dict().items()}
        arrays.update({f"rho.{k}": v for k, v in model.rho.as_dict().items()})
        meta = {
            "kind": "bnn",
            "n_samples": model.n_samples,
            "prior": [model.prior.pi, model.prior.sigma1, model.prior.sigma2],
        }
        return meta, arrays
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_model(path, model: Predictor) -> None:
    """Write ``model`` as an ``.npz`` archive (see README for the layout)."""
    meta, arrays = _flatten(model)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_model(path) -> Predictor:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    kind = meta["kind"]
    if kind == "mlp":
        return MlpParams.from_dict(arrays)
    if kind == "ensemble":
        members = []
        for i in range(meta["members"]):
            pre = f"m{i}."
            members.append(MlpParams.from_dict({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)}))
        return Ensemble(members)
    if kind == "bnn":
        mu = MlpParams.from_dict({k[3:]: v for k, v in arrays.items() if k.startswith("mu.")})
        rho = MlpParams.from_dict({k[4:]: v for k, v in arrays.items() if k.startswith("rho.")})
        pi, s1, s2 = meta["prior"]
        return BayesMlp(mu, rho, ScaleMixturePrior(pi, s1, s2), meta["n_samples"])
    raise ValueError(f"unknown checkpoint kind {kind!r}")
