"""Compare the compiled flow kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 100 500 5000] [--repeat 7]

Times each kernel on a [1, 100, 1] tanh field with 10 RK4 substeps, checks
both backends agree, then times one training step of the tape-composed
flow against the fused node for a batch of 100 pairs.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from dvalab import autodiff as ad
from dvalab import kernels
from dvalab.models import mlp_init, params_on_tape
from dvalab.odeident import flow_on_tape


def _median_ms(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _flat(result) -> np.ndarray:
    parts = result if isinstance(result, tuple) else (result,)
    return np.concatenate([np.atleast_1d(np.asarray(v, dtype=np.float64)).ravel() for v in parts])


def kernel_table(rows_list, repeat, substeps=10, hidden=100):
    rng = np.random.default_rng(0)
    w1, b1 = rng.standard_normal(hidden), rng.standard_normal(hidden)
    w2, b2 = rng.standard_normal(hidden) / np.sqrt(hidden), 0.1
    impls = {"python": kernels.python_impl}
    if kernels.compiled_impl is not None:
        impls["compiled"] = kernels.compiled_impl
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':<14}{'rows':>7}" + "".join(f"{name + ' ms':>14}" for name in impls) + f"{'speedup':>10}{'max diff':>11}")
    for rows in rows_list:
        x = rng.uniform(1, 9, rows)
        gy = rng.standard_normal(rows)
        calls = {
            "flow_forward": lambda m: m.flow_forward(x, w1, b1, w2, b2, 0.1, substeps),
            "flow_tangent": lambda m: m.flow_tangent(x, w1, b1, w2, b2, 0.1, substeps),
            "flow_vjp": lambda m: m.flow_vjp(x, w1, b1, w2, b2, 0.1, substeps, gy),
        }
        for name, call in calls.items():
            ms = {k: _median_ms(lambda m=m: call(m), repeat) for k, m in impls.items()}
            outs = [_flat(call(m)) for m in impls.values()]
            diff = float(np.max(np.abs(outs[0] - outs[-1])))
            speed = ms["python"] / ms["compiled"] if "compiled" in ms else float("nan")
            print(f"{name:<14}{rows:>7}" + "".join(f"{v:>14.3f}" for v in ms.values()) + f"{speed:>10.2f}{diff:>11.1e}")


def step_table(repeat, substeps=10, batch=100):
    rng = np.random.default_rng(1)
    net = mlp_init([1, 100, 1], 0)
    x = rng.uniform(1, 9, batch)
    y = rng.uniform(1, 9, batch)

    def step(fused):
        tape = ad.Tape()
        layers = params_on_tape(tape, net)
        out = flow_on_tape(layers, tape.const(x), 0.1, substeps, fused=fused)
        tape.backward(ad.mean(ad.square(ad.sub(out, y))))

    print(f"\none training step, batch {batch}, {substeps} substeps (backend {kernels.BACKEND}):")
    for label, fused in (("tape-composed", False), ("fused node", True)):
        print(f"  {label:<14}{_median_ms(lambda: step(fused), repeat):>10.2f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, nargs="+", default=[100, 500, 5000])
    p.add_argument("--repeat", type=int, default=7)
    args = p.parse_args()
    kernel_table(args.rows, args.repeat)
    step_table(args.repeat)


if __name__ == "__main__":
    main()
