"""Seed-sweep runner for the synthetic benchmarks.

A sweep is described by an :class:`ExperimentConfig` (stored as JSON).  Each
(noise level, seed) pair is one independent run with a seed derived from the
master seed and its position in the sweep, so results do not depend on how
runs are scheduled across workers.  Output rows are sorted before writing,
which makes ``results.csv`` byte-identical across reruns and replays.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import TrainingAborted, make_predictor, train_predictor
from .odeident import IntegrationError, OdeConfig, mse_noise_estimate, node_train, ode_dva
from .optim import TrainConfig
from .synthdata import NoiseSpec, gen_toy, gen_trajectories, target_fn
from .uncertainty import (
    ConstraintViolation,
    DegenerateSegmentError,
    DvaConfig,
    denoise,
    dva_train_input,
    dva_train_label,
    make_head,
    residual_log_var,
    va_train,
)

log = logging.getLogger(__name__)

RESULTS_HEADER = ["experiment", "method", "predictor", "noise_target", "noise_kind", "a2", "seed", "estimate", "metric", "wall_ms"]
EXPERIMENTS = ("table1", "table2", "table3", "appendixD", "custom")
METHODS = ("va", "dva", "mse-est")
PREDICTORS = ("bnn", "ensemble", "mlp")
ABORTS = (TrainingAborted, IntegrationError, ConstraintViolation, DegenerateSegmentError)


class ConfigError(ValueError):
    """The experiment configuration does not validate."""


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a sweep.

    ``a2`` lists noise variances (the squared magnitude ``a``); ``seeds`` are
    seed labels, combined with ``master_seed`` and sweep position into the
    per-run seed.  ``lr``, ``epochs`` and ``batch`` apply to every trainer.
    ``segments`` is the number of rank blocks for heteroscedastic runs and
    ``substeps`` the RK4 steps per observation gap for trajectories.
    """

    experiment: str = "custom"
    methods: list = field(default_factory=lambda: ["va", "dva"])
    predictor: str = "ensemble"
    noise_target: str = "label"
    noise_kind: str = "homo"
    a2: list = field(default_factory=lambda: [0.5, 1.0, 2.0, 8.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    master_seed: int = 0
    n_train: int = 1000
    hidden: int = 100
    ensemble_size: int = 5
    lr: float = 0.01
    epochs: int = 200
    batch: int | None = 100
    segments: int = 1
    head: str = "scalar"
    n_traj: int = 100
    horizon: float = 5.0
    dt_obs: float = 0.1
    substeps: int = 10
    n_model_samples: int = 5
    variance_lr_final: float | None = 1e-4
    decay_from: float = 0.75
    head_init: str = "residual"
    plot: str | None = None
    record_wall_ms: bool = False

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ConfigError(f"methods must be a nonempty subset of {METHODS}")
        if self.predictor not in PREDICTORS:
            raise ConfigError(f"predictor must be one of {PREDICTORS}")
        if self.noise_target not in ("label", "input", "trajectory"):
            raise ConfigError("noise_target must be label, input or trajectory")
        if self.noise_kind not in ("homo", "hetero"):
            raise ConfigError("noise_kind must be homo or hetero")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not self.a2:
            raise ConfigError("a2 must be nonempty")
        if any(not (isinstance(a, (int, float)) and a >= 0 and math.isfinite(a)) for a in self.a2):
            raise ConfigError("a2 values must be finite and >= 0")
        if self.experiment != "custom" and any(a <= 0 for a in self.a2):
            raise ConfigError("a2 values must be > 0")
        if self.n_train < 2 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("n_train >= 2, epochs >= 0 and lr > 0 required")
        if self.batch is not None and self.batch < 1:
            raise ConfigError("batch must be >= 1 or null")
        if self.noise_target == "trajectory":
            if set(self.methods) - {"dva", "mse-est"}:
                raise ConfigError("trajectory runs support methods dva and mse-est")
            if self.predictor == "ensemble":
                raise ConfigError("trajectory runs take a bnn or mlp vector field")
        elif "mse-est" in self.methods:
            raise ConfigError("mse-est applies to trajectory runs only")
        if self.noise_target == "input" and set(self.methods) != {"dva"}:
            raise ConfigError("input-noise runs support method dva only")
        if self.head not in ("scalar", "network"):
            raise ConfigError("head must be scalar or network")
        if self.head_init not in ("zero", "residual"):
            raise ConfigError("head_init must be zero or residual")
        if not 0.0 <= self.decay_from < 1.0:
            raise ConfigError("decay_from must lie in [0, 1)")
        if self.variance_lr_final is not None and self.variance_lr_final <= 0:
            raise ConfigError("variance_lr_final must be positive or null")
        if self.plot not in (None, "variance-vs-x", "estimate-vs-a2", "denoise-scatter"):
            raise ConfigError(f"unknown plot kind {self.plot!r}")
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentConfig":
        """Sweeps shaped like the benchmark tables."""
        base = {
            "table1": dict(experiment="table1", methods=["va", "dva"], predictor="bnn"),
            "table2": dict(experiment="table2", methods=["va", "dva"], predictor="ensemble", noise_kind="hetero",
                           segments=10, head="network"),
            "table3": dict(experiment="table3", methods=["mse-est", "dva"], predictor="bnn", noise_target="trajectory",
                           seeds=[0, 1, 2], substeps=5),
            "appendixD": dict(experiment="appendixD", methods=["dva"], predictor="ensemble", noise_target="input",
                              a2=[0.5, 2.0, 8.0]),
        }
        if name not in base:
            raise ConfigError(f"no preset named {name!r}; choose from {sorted(base)}")
        return cls(**{**base[name], **overrides}).validate()


def derived_seed(master: int, setting: int, seed_index: int) -> int:
    """Run seed from the sweep position; independent of scheduling order."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFF, setting, seed_index])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# single runs


def _train_cfg(c: ExperimentConfig) -> TrainConfig:
    return TrainConfig(lr=c.lr, epochs=c.epochs, batch=c.batch)


def _variance_cfg(c: ExperimentConfig) -> TrainConfig:
    """Schedule for variance heads: constant lr, then a geometric tail decay."""
    return TrainConfig(lr=c.lr, epochs=c.epochs, batch=c.batch, lr_final=c.variance_lr_final, decay_from=c.decay_from)


def _dva_cfg(c: ExperimentConfig, **kw) -> DvaConfig:
    base = dict(lr=c.lr, epochs=c.epochs, batch=c.batch, segments=c.segments, head=c.head, hidden=c.hidden,
                lr_final=c.variance_lr_final, decay_from=c.decay_from, head_init=c.head_init)
    return DvaConfig(**{**base, **kw})


def _sub_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _grid(lo=1.0, hi=9.0, n=101) -> np.ndarray:
    return np.linspace(lo, hi, n)


def _run_toy(c: ExperimentConfig, a2: float, seed: int) -> tuple[dict, dict]:
    """Estimates and plot series for one toy-regression run."""
    s_data, s_pred, s_va, s_dva = _sub_seeds(seed, 4)
    noise = NoiseSpec.from_variance(a2, target=c.noise_target, kind=c.noise_kind)
    data = gen_toy(c.n_train, noise, s_data)
    obs = data.observed()
    model = make_predictor(c.predictor, s_pred, hidden=c.hidden, ensemble_size=c.ensemble_size)
    model = train_predictor(model, obs, _train_cfg(c), seed=s_pred)
    est, extra = {}, {}
    grid = _grid()
    extra["x"] = grid.tolist()
    extra["true_variance"] = noise.variance(grid).tolist()
    if c.noise_target == "input":
        cfg = _dva_cfg(c, head="scalar", segments=1, n_model_samples=c.n_model_samples, head_init="zero")
        state = dva_train_input(model, obs, cfg, seed=s_dva)
        est["dva"] = (state.noise_variance(), None)
        extra["max_constraint_violation"] = max(state.history["constraint_violation"], default=0.0)
        return est, extra
    true_var = noise.variance(data.x_obs)

    def metric(var_fn):
        if c.noise_kind == "homo":
            return None
        return float(np.mean((var_fn(data.x_obs) - true_var) ** 2))

    if "va" in c.methods:
        rng = np.random.default_rng(s_va)
        head = make_head(c.head, s_va, c.hidden)
        if c.head_init == "residual":
            head = head.offset(residual_log_var(model, obs, rng))
        head = va_train(model, obs, head, _variance_cfg(c), seed=rng)
        est["va"] = (float(np.mean(head.variance(data.x_obs))), metric(head.variance))
        extra["va_variance"] = np.broadcast_to(head.variance(grid), grid.shape).tolist()
    if "dva" in c.methods:
        state = dva_train_label(model, obs, _dva_cfg(c), seed=s_dva)
        est["dva"] = (float(np.mean(state.noise_variance(data.x_obs))), metric(state.noise_variance))
        extra["dva_variance"] = np.broadcast_to(state.noise_variance(grid), grid.shape).tolist()
        extra["max_constraint_violation"] = max(state.history["constraint_violation"], default=0.0)
        clean = denoise(data, state)
        extra["denoise_mse"] = float(np.mean((clean.y_obs - data.y_clean) ** 2))
        extra["noisy_mse"] = float(np.mean((data.y_obs - data.y_clean) ** 2))
        keep = np.arange(0, data.M, max(1, data.M // 200))
        extra["scatter"] = {
            "x": data.x_obs[keep].tolist(),
            "noisy": data.y_obs[keep].tolist(),
            "denoised": clean.y_obs[keep].tolist(),
        }
    return est, extra


def _run_traj(c: ExperimentConfig, a2: float, seed: int) -> tuple[dict, dict]:
    s_data, s_field, s_est, s_dva = _sub_seeds(seed, 4)
    trajs = gen_trajectories(c.n_traj, c.horizon, c.dt_obs, NoiseSpec.from_variance(a2), s_data)
    cfg = OdeConfig(lr=c.lr, epochs=c.epochs, batch=c.batch, dt_obs=c.dt_obs, substeps=c.substeps,
                    n_model_samples=c.n_model_samples)
    model = make_predictor(c.predictor, s_field, hidden=c.hidden)
    field_ = node_train(trajs, model, cfg, seed=s_field)
    est, extra = {}, {"sample_noise_variance": float(np.var(trajs.noise(), ddof=1))}
    if "mse-est" in c.methods:
        est["mse-est"] = (mse_noise_estimate(field_, trajs, cfg, seed=s_est), None)
    if "dva" in c.methods:
        state = ode_dva(field_, trajs, cfg, seed=s_dva)
        est["dva"] = (state.noise_variance(), None)
        extra["max_constraint_violation"] = max(state.history["constraint_violation"], default=0.0)
    return est, extra


def run_one(config_json: str, setting: int, seed_index: int) -> dict:
    """One (noise level, seed) run; returns rows plus diagnostics.  Picklable entry point."""
    c = ExperimentConfig.from_json(config_json)
    a2 = float(c.a2[setting])
    seed = derived_seed(c.master_seed, setting, seed_index)
    label = c.seeds[seed_index]
    t0 = time.perf_counter()
    out = {"setting": setting, "seed_index": seed_index, "seed": label, "run_seed": seed, "a2": a2}
    try:
        fn = _run_traj if c.noise_target == "trajectory" else _run_toy
        est, extra = fn(c, a2, seed)
    except ABORTS as exc:
        out.update(rows=[], error=f"{type(exc).__name__}: {exc}")
        return out
    wall = (time.perf_counter() - t0) * 1e3
    rows = []
    for method in c.methods:
        value, metric = est[method]
        if metric is None:
            metric = abs(value - a2)
        rows.append({
            "experiment": c.experiment, "method": method, "predictor": c.predictor,
            "noise_target": c.noise_target, "noise_kind": c.noise_kind, "a2": a2, "seed": label,
            "estimate": float(value), "metric": float(metric),
        })
    out.update(rows=rows, extra=extra, wall_ms=wall)
    return out


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list[dict]
    runs: list[dict]

    @property
    def errors(self) -> list[dict]:
        return [{"a2": r["a2"], "seed": r["seed"], "reason": r["error"]} for r in self.runs if r.get("error")]

    def aggregate(self) -> list[dict]:
        return aggregate(self.rows)

    def run_for(self, a2: float, seed) -> dict:
        for r in self.runs:
            if r["a2"] == a2 and r["seed"] == seed:
                return r
        raise KeyError((a2, seed))


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sort_key(row: dict):
    return (row["experiment"], row["method"], row["predictor"], row["noise_target"], row["noise_kind"],
            row["a2"], str(row["seed"]))


def results_csv(rows: list[dict]) -> str:
    """Canonical CSV text: fixed header, sorted rows, repr floats."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for row in sorted(rows, key=_sort_key):
        w.writerow([_fmt(row.get(k)) for k in RESULTS_HEADER])
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        if r.fieldnames != RESULTS_HEADER:
            raise ValueError(f"unexpected results header {r.fieldnames}")
        rows = []
        for row in r:
            for k in ("a2", "estimate", "metric"):
                row[k] = float(row[k])
            row["wall_ms"] = float(row["wall_ms"]) if row["wall_ms"] else None
            rows.append(row)
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and population std of estimate and metric across seeds, per setting."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = tuple(row[k] for k in ("experiment", "method", "predictor", "noise_target", "noise_kind", "a2"))
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(v) if not isinstance(v, float) else v for v in k)):
        g = groups[key]
        est = np.array([r["estimate"] for r in g], dtype=np.float64)
        met = np.array([r["metric"] for r in g], dtype=np.float64)
        out.append({
            **dict(zip(("experiment", "method", "predictor", "noise_target", "noise_kind", "a2"), key)),
            "n": len(g), "estimate_mean": float(est.mean()), "estimate_std": float(est.std()),
            "metric_mean": float(met.mean()), "metric_std": float(met.std()),
        })
    return out


def version_string() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        v = version("artifact")
    except PackageNotFoundError:
        v = "0+unknown"
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            v += "+g" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return v


def run(config: ExperimentConfig, out_dir=None, threads: int = 1, progress=None) -> ExperimentResult:
    """Execute every (noise level, seed) run and write the artifacts to ``out_dir``."""
    config.validate()
    text = config.to_json()
    tasks = [(s, k) for s in range(len(config.a2)) for k in range(len(config.seeds))]
    progress = progress or (lambda msg: print(msg, file=sys.stderr))
    runs = []
    if threads <= 1:
        for s, k in tasks:
            runs.append(run_one(text, s, k))
            progress(_progress_line(runs[-1], len(runs), len(tasks)))
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_one, text, s, k) for s, k in tasks]
            for i, fut in enumerate(futures):
                runs.append(fut.result())
                progress(_progress_line(runs[-1], i + 1, len(tasks)))
    runs.sort(key=lambda r: (r["setting"], r["seed_index"]))
    rows = []
    for r in runs:
        for row in r["rows"]:
            row["wall_ms"] = repr(round(r["wall_ms"], 3)) if config.record_wall_ms else ""
            rows.append(row)
    result = ExperimentResult(config, rows, runs)
    if out_dir is not None:
        write_artifacts(result, out_dir)
    return result


def _progress_line(r: dict, i: int, n: int) -> str:
    status = r.get("error") or ", ".join(f"{row['method']}={row['estimate']:.4g}" for row in r["rows"])
    return f"[{i}/{n}] a2={r['a2']} seed={r['seed']}: {status}"


def write_artifacts(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(results_csv(result.rows))
    manifest = {
        "config": dataclasses.asdict(result.config),
        "version": version_string(),
        "runs": [{"a2": r["a2"], "seed": r["seed"], "run_seed": r["run_seed"]} for r in result.runs],
        "aborts": result.errors,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    timings = [{"a2": r["a2"], "seed": r["seed"], "wall_ms": r.get("wall_ms")} for r in result.runs]
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    details = [{"a2": r["a2"], "seed": r["seed"], **r.get("extra", {})} for r in result.runs]
    (out / "series.json").write_text(json.dumps(details) + "\n")
    if result.config.plot:
        from .plotting import emit_plot

        emit_plot(result, result.config.plot, out / "plot.svg")
    return out


def load_manifest(path) -> ExperimentConfig:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        d = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {p}: {exc}") from exc
    if "config" not in d:
        raise ConfigError("manifest has no config section")
    return ExperimentConfig.from_dict(d["config"])


def replay(manifest_path, out_dir, threads: int = 1) -> ExperimentResult:
    """Rerun a sweep from its manifest alone."""
    return run(load_manifest(manifest_path), out_dir, threads)


def load_result(out_dir) -> ExperimentResult:
    """Rebuild an :class:`ExperimentResult` from written artifacts (for plotting)."""
    out = Path(out_dir)
    config = load_manifest(out)
    rows = read_results_csv(out / "results.csv")
    series_path = out / "series.json"
    runs = []
    if series_path.exists():
        for d in json.loads(series_path.read_text()):
            runs.append({"a2": d.pop("a2"), "seed": d.pop("seed"), "extra": d, "rows": []})
    return ExperimentResult(config, rows, runs)


def cpu_count() -> int:
    return os.cpu_count() or 1
