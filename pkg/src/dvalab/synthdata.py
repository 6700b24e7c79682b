"""Seeded generators for the toy regression task and noisy 1-D trajectories."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TRAIN_DOMAIN = (1.0, 9.0)
TEST_DOMAIN = (1.0, 11.0)


def target_fn(x):
    """x (1 + sin x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * (1.0 + np.sin(x))


@dataclass(frozen=True)
class NoiseSpec:
    """Injected Gaussian noise.

    ``magnitude`` is the std-dev scale ``a``; the heteroscedastic profile is
    ``a (1 + 0.1 x)``.
    """

    target: str = "label"  # "label" | "input"
    kind: str = "homo"  # "homo" | "hetero"
    magnitude: float = 0.0

    def __post_init__(self):
        if self.target not in ("label", "input"):
            raise ValueError(f"noise target must be 'label' or 'input', got {self.target!r}")
        if self.kind not in ("homo", "hetero"):
            raise ValueError(f"noise kind must be 'homo' or 'hetero', got {self.kind!r}")
        if not self.magnitude >= 0:
            raise ValueError("noise magnitude must be >= 0")

    @classmethod
    def from_variance(cls, a2: float, target="label", kind="homo") -> "NoiseSpec":
        return cls(target, kind, math.sqrt(a2))

    def std(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "homo":
            return np.full_like(x, self.magnitude)
        return self.magnitude * (1.0 + 0.1 * x)

    def variance(self, x) -> np.ndarray:
        return self.std(x) ** 2


@dataclass(frozen=True)
class ObservedData:
    """What a trainer is allowed to see: observed inputs and labels only."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.x)


@dataclass
class Dataset:
    """Observed data plus the clean values and noise draws that produced it.

    ``x_obs = x_clean + xi`` and ``y_obs = y_clean + eps`` hold exactly.
    """

    x_clean: np.ndarray
    x_obs: np.ndarray
    y_clean: np.ndarray
    y_obs: np.ndarray
    xi: np.ndarray
    eps: np.ndarray
    noise: NoiseSpec | None = None

    @property
    def M(self) -> int:
        return len(self.x_obs)

    def __len__(self):
        return self.M

    def observed(self) -> ObservedData:
        return ObservedData(self.x_obs, self.y_obs)

    def with_labels(self, y_obs) -> "Dataset":
        y_obs = np.asarray(y_obs, dtype=np.float64)
        return Dataset(self.x_clean, self.x_obs, self.y_clean, y_obs, self.xi, y_obs - self.y_clean, self.noise)

    def with_inputs(self, x_obs) -> "Dataset":
        x_obs = np.asarray(x_obs, dtype=np.float64)
        return Dataset(self.x_clean, x_obs, self.y_clean, self.y_obs, x_obs - self.x_clean, self.eps, self.noise)


def observed(data) -> ObservedData:
    """Training-side view; refuses objects that carry the evaluation side channel."""
    if isinstance(data, ObservedData):
        return data
    if isinstance(data, Dataset):
        raise TypeError("trainers take Dataset.observed(), not the Dataset with its clean values")
    return ObservedData(np.asarray(data[0], dtype=np.float64), np.asarray(data[1], dtype=np.float64))


def standard_normal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Box-Muller transform of uniform draws."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:n]


def _add_noise(clean: np.ndarray, std: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    obs = clean + std * standard_normal(rng, len(clean))
    # store the draw as obs - clean so the decomposition is exact in floating point
    return obs, obs - clean


def gen_toy(M: int, noise: NoiseSpec, seed, domain=TRAIN_DOMAIN, fn: Callable = target_fn) -> Dataset:
    """``M`` inputs ~ U[domain], labels ``fn(x)``, Gaussian noise on inputs or labels."""
    if M < 2:
        raise ValueError("M must be >= 2")
    rng = np.random.default_rng(seed)
    lo, hi = domain
    x = lo + (hi - lo) * rng.random(M)
    y = fn(x)
    zeros = np.zeros(M)
    if noise.target == "label":
        y_obs, eps = _add_noise(y, noise.std(x), rng)
        return Dataset(x, x.copy(), y, y_obs, zeros, eps, noise)
    x_obs, xi = _add_noise(x, noise.std(x), rng)
    return Dataset(x, x_obs, y, y.copy(), xi, zeros, noise)


def gen_test(M: int = 1000, seed=0, fn: Callable = target_fn) -> Dataset:
    """Noise-free evaluation split on the wider domain U[1, 11]."""
    return gen_toy(M, NoiseSpec(), seed, domain=TEST_DOMAIN, fn=fn)


# ---------------------------------------------------------------------------
# trajectories


def toy_field(x):
    """Right-hand side of dx/dt = x (1 + sin x)."""
    return target_fn(x)


def rk4_integrate(f, x0, dt: float, n_steps: int) -> np.ndarray:
    """Classical RK4 from ``x0``; returns the state after every step (row 0 is ``x0``)."""
    x = np.array(x0, dtype=np.float64)
    out = np.empty((n_steps + 1,) + x.shape)
    out[0] = x
    for k in range(n_steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return out


@dataclass
class Trajectory:
    t: np.ndarray
    x_clean: np.ndarray
    x_obs: np.ndarray
    noise: np.ndarray
    truncated: bool = False


@dataclass
class TrajectorySet:
    trajectories: list[Trajectory]
    dt_obs: float = 0.1
    noise_spec: NoiseSpec | None = None
    _pairs: tuple | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return len(self.trajectories)

    @property
    def n_points(self) -> int:
        return int(sum(len(tr.t) for tr in self.trajectories))

    def observations(self) -> np.ndarray:
        """All observed states, trajectories concatenated."""
        return np.concatenate([tr.x_obs for tr in self.trajectories])

    def clean(self) -> np.ndarray:
        return np.concatenate([tr.x_clean for tr in self.trajectories])

    def noise(self) -> np.ndarray:
        return np.concatenate([tr.noise for tr in self.trajectories])

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat indices (start, end) of every consecutive observation pair."""
        if self._pairs is None:
            starts, offset = [], 0
            for tr in self.trajectories:
                n = len(tr.t)
                starts.append(np.arange(offset, offset + n - 1))
                offset += n
            s = np.concatenate(starts) if starts else np.zeros(0, dtype=int)
            self._pairs = (s, s + 1)
        return self._pairs


def gen_trajectories(
    n_traj: int = 100,
    horizon: float = 5.0,
    dt_obs: float = 0.1,
    noise: NoiseSpec | None = None,
    seed=0,
    field: Callable = toy_field,
    x0_domain=TRAIN_DOMAIN,
    substep: float = 1e-3,
) -> TrajectorySet:
    """Noisy observations of ``dx/dt = field(x)`` from x0 ~ U[x0_domain].

    Clean states come from RK4 with step ``substep``; every stored point,
    including t=0, gets i.i.d. Gaussian noise.  A trajectory that stops
    being finite is cut at its last finite point and flagged ``truncated``.
    """
    noise = noise or NoiseSpec()
    if noise.kind != "homo":
        raise ValueError("trajectory noise is homoscedastic only")
    rng = np.random.default_rng(seed)
    lo, hi = x0_domain
    x0 = lo + (hi - lo) * rng.random(n_traj)
    n_obs = int(round(horizon / dt_obs))
    per_obs = int(round(dt_obs / substep))
    with np.errstate(over="ignore", invalid="ignore"):
        fine = rk4_integrate(field, x0, dt_obs / per_obs, n_obs * per_obs)
    states = fine[::per_obs]  # (n_obs + 1, n_traj)
    t = np.arange(n_obs + 1) * dt_obs
    out = []
    for j in range(n_traj):
        xs = states[:, j]
        finite = np.isfinite(xs)
        n = len(xs) if finite.all() else int(np.argmin(finite))
        xs = xs[:n].copy()
        obs, drawn = _add_noise(xs, np.full(n, noise.magnitude), rng)
        out.append(Trajectory(t[:n].copy(), xs, obs, drawn, truncated=n < len(t)))
    return TrajectorySet(out, dt_obs, noise)


# ---------------------------------------------------------------------------
# CSV interchange

DATASET_HEADER = ["x_clean", "x_obs", "y_clean", "y_obs", "xi", "eps"]
TRAJECTORY_HEADER = ["traj_id", "t", "x_clean", "x_obs"]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset_csv(path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DATASET_HEADER)
        for row in zip(data.x_clean, data.x_obs, data.y_clean, data.y_obs, data.xi, data.eps):
            w.writerow([_fmt(v) for v in row])


def read_dataset_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != DATASET_HEADER:
            raise ValueError(f"unexpected dataset header {header}")
        rows = np.array([[float(v) for v in row] for row in r], dtype=np.float64).reshape(-1, 6)
    return Dataset(*(rows[:, i].copy() for i in range(6)))


def write_trajectories_csv(path, trajs: TrajectorySet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJECTORY_HEADER)
        for j, tr in enumerate(trajs.trajectories):
            for t, xc, xo in zip(tr.t, tr.x_clean, tr.x_obs):
                w.writerow([j, _fmt(t), _fmt(xc), _fmt(xo)])


def read_trajectories_csv(path, dt_obs: float | None = None) -> TrajectorySet:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != TRAJECTORY_HEADER:
            raise ValueError(f"unexpected trajectory header {header}")
        rows: dict[int, list] = {}
        for row in r:
            rows.setdefault(int(row[0]), []).append([float(v) for v in row[1:]])
    trajs = []
    for j in sorted(rows):
        a = np.array(rows[j], dtype=np.float64)
        trajs.append(Trajectory(a[:, 0].copy(), a[:, 1].copy(), a[:, 2].copy(), a[:, 2] - a[:, 1]))
    if dt_obs is None:
        t0 = trajs[0].t
        dt_obs = float(t0[1] - t0[0]) if len(t0) > 1 else 0.1
    return TrajectorySet(trajs, dt_obs)
