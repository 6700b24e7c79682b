"""Command-line entry point: ``dvalab <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 a run aborted.
Progress goes to standard error; machine-readable results to files or
standard output as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


class UsageError(Exception):
    pass


def _out(args, default: str) -> Path:
    return Path(args.out if args.out else default)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from .synthdata import NoiseSpec, gen_toy, gen_trajectories, write_dataset_csv, write_trajectories_csv

    out = _out(args, "trajectories.csv" if args.kind == "trajectory" else "dataset.csv")
    if args.kind == "trajectory":
        noise = NoiseSpec.from_variance(args.a2)
        trajs = gen_trajectories(args.n_traj, args.horizon, args.dt_obs, noise, args.seed)
        write_trajectories_csv(out, trajs)
        n = trajs.n_points
    else:
        noise = NoiseSpec.from_variance(args.a2, target=args.noise_target, kind=args.noise_kind)
        data = gen_toy(args.M, noise, args.seed)
        write_dataset_csv(out, data)
        n = data.M
    print(f"wrote {n} points to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    from .models import make_predictor, save_model, train_predictor
    from .optim import TrainConfig
    from .synthdata import read_dataset_csv
    from .uncertainty import DvaConfig, dva_train_input, dva_train_label, make_head, save_state, va_train

    data = read_dataset_csv(args.data)
    obs = data.observed()
    out = _out(args, "trained")
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch)
    model = train_predictor(make_predictor(args.predictor, args.seed), obs, cfg, seed=args.seed)
    save_model(out / "model.npz", model)
    report = {"predictor": args.predictor, "model": str(out / "model.npz")}
    if args.method == "va":
        head = va_train(model, obs, make_head(args.head, args.seed), cfg, seed=args.seed)
        report["estimate"] = float(np.mean(head.variance(obs.x)))
    elif args.method in ("dva", "dva-input"):
        dcfg = DvaConfig(lr=args.lr, epochs=args.epochs, batch=args.batch, segments=args.segments, head=args.head)
        trainer = dva_train_input if args.method == "dva-input" else dva_train_label
        state = trainer(model, obs, dcfg, seed=args.seed)
        save_state(out / "state.npz", state)
        report["estimate"] = float(np.mean(state.noise_variance(obs.x)))
        report["state"] = str(out / "state.npz")
    _print_json(report)
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiments import ExperimentConfig, load_manifest, run

    sources = [s for s in (args.config, args.preset, args.manifest) if s]
    if len(sources) != 1:
        raise UsageError("give exactly one of --config, --preset or --manifest")
    if args.config:
        config = ExperimentConfig.from_json(Path(args.config).read_text())
    elif args.preset:
        config = ExperimentConfig.preset(args.preset)
    else:
        config = load_manifest(args.manifest)
    overrides = {}
    if args.seed_given and not args.manifest:
        overrides["master_seed"] = args.seed
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.a2:
        overrides["a2"] = [float(s) for s in args.a2.split(",")]
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        config = ExperimentConfig.from_dict({**config.__dict__, **overrides})
    out = _out(args, f"runs/{config.experiment}")
    result = run(config, out, threads=args.threads)
    _print_json(result.aggregate())
    if result.errors:
        print(f"{len(result.errors)} run(s) aborted; see {out / 'manifest.json'}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_oracle(args) -> int:
    from . import oracle

    if args.kind == "bias":
        c, k = args.bias_const, args.bias_slope
        rep = oracle.bias_report(args.sigma2, lambda x: c + k * x, (args.lo, args.hi), args.M, args.mc_samples,
                                 args.replicates, seed=args.seed)
        _print_json(rep.to_dict())
        return EXIT_OK
    from .models import load_model, sample_mean
    from .synthdata import read_dataset_csv

    if not args.data or not args.model:
        raise UsageError(f"oracle {args.kind} needs --data and --model")
    data = read_dataset_csv(args.data)
    model = load_model(args.model)
    mu = sample_mean(model, data.x_obs, np.random.default_rng(args.seed))
    r = data.y_obs - mu
    if args.kind == "stationary":
        _print_json({
            "va_stationary": oracle.va_stationary(r),
            "dva_stationary": oracle.dva_stationary(r),
            "sample_noise_variance": oracle.sample_noise_variance(data.eps),
        })
        return EXIT_OK
    from .uncertainty import load_state

    if not args.state:
        raise UsageError("oracle kkt needs --state")
    st = load_state(args.state)
    if st.va_head is None or st.sigma_head.kind != "scalar":
        raise UsageError("kkt residuals need a label DVA state with scalar heads")
    rep = oracle.kkt_residuals(data.y_obs, mu, st.eps_hat, float(st.sigma_head.std()), float(st.va_head.variance()))
    _print_json(rep.to_dict())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    reports = run_suite(args.configs, args.seed)
    ok = True
    for r in reports:
        ok &= r.passed
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.family}: max rel error {r.max_error:.3e} (tol {r.tolerance:g}, {r.configs} configs, {r.seconds:.2f}s)")
    return EXIT_OK if ok else EXIT_ABORT


def cmd_plot(args) -> int:
    from .experiments import load_result
    from .plotting import emit_plot

    result = load_result(args.results)
    out = _out(args, str(Path(args.results) / f"{args.kind}.svg"))
    emit_plot(result, args.kind, out, a2=args.a2)
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=d(None), help="master seed")
    common.add_argument("--out", default=d(None), help="output file or directory")
    common.add_argument("--threads", type=int, default=d(1), help="worker processes for sweeps")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="dvalab", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset or trajectory CSV")
    g.add_argument("--kind", choices=["toy", "trajectory"], default="toy")
    g.add_argument("--M", type=int, default=1000)
    g.add_argument("--a2", type=float, default=1.0)
    g.add_argument("--noise-target", choices=["label", "input"], default="label")
    g.add_argument("--noise-kind", choices=["homo", "hetero"], default="homo")
    g.add_argument("--n-traj", type=int, default=100)
    g.add_argument("--horizon", type=float, default=5.0)
    g.add_argument("--dt-obs", type=float, default=0.1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a predictor and optionally a variance model")
    t.add_argument("--data", required=True)
    t.add_argument("--predictor", choices=["mlp", "ensemble", "bnn"], default="ensemble")
    t.add_argument("--method", choices=["none", "va", "dva", "dva-input"], default="none")
    t.add_argument("--head", choices=["scalar", "network"], default="scalar")
    t.add_argument("--segments", type=int, default=1)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch", type=int, default=100)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", parents=[common], help="run an experiment sweep")
    r.add_argument("--config", help="ExperimentConfig JSON file")
    r.add_argument("--preset", choices=["table1", "table2", "table3", "appendixD"])
    r.add_argument("--manifest", help="replay a sweep from its manifest.json")
    r.add_argument("--seeds", help="comma-separated seed labels (override)")
    r.add_argument("--a2", help="comma-separated noise variances (override)")
    r.add_argument("--epochs", type=int, default=None)
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("oracle", parents=[common], help="closed-form reference values as JSON")
    o.add_argument("kind", choices=["bias", "stationary", "kkt"])
    o.add_argument("--sigma2", type=float, default=1.0)
    o.add_argument("--bias-const", type=float, default=0.0)
    o.add_argument("--bias-slope", type=float, default=0.0)
    o.add_argument("--lo", type=float, default=1.0)
    o.add_argument("--hi", type=float, default=9.0)
    o.add_argument("--M", type=int, default=10_000)
    o.add_argument("--mc-samples", type=int, default=100_000)
    o.add_argument("--replicates", type=int, default=0)
    o.add_argument("--data")
    o.add_argument("--model")
    o.add_argument("--state")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    c.add_argument("--configs", type=int, default=100)
    c.set_defaults(func=cmd_gradcheck)

    pl = sub.add_parser("plot", parents=[common], help="render an SVG from a run directory")
    pl.add_argument("--results", required=True, help="directory written by `run`")
    pl.add_argument("--kind", choices=["variance-vs-x", "estimate-vs-a2", "denoise-scatter"], required=True)
    pl.add_argument("--a2", type=float, default=None)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    from .experiments import ConfigError
    from .models import TrainingAborted
    from .odeident import IntegrationError
    from .plotting import PlotError
    from .uncertainty import ConstraintViolation, DegenerateSegmentError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (UsageError, ConfigError, PlotError, FileNotFoundError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingAborted, IntegrationError, ConstraintViolation, DegenerateSegmentError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
