"""Time the fused training kernel with numba and with the pure-numpy fallback.

The RMFN_NUMBA flag is read at import, so each mode runs in its own
subprocess. The tape (autodiff) path is timed once as a third reference.

    python benchmarks/bench_kernels.py --examples 64 --repeats 5
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

CONFIGS = {
    "micro": dict(dims=(2, 2, 2), hidden=3, d_f=4, d_z=3, K=2),
    "default": dict(dims=(4, 4, 4), hidden=8, d_f=8, d_z=4, K=3),
}


def build(name, n, T):
    from rmfn.data import GeneratorSpec, gen_synthetic
    from rmfn.model import ModelConfig, build_variant

    c = CONFIGS[name]
    h = c["hidden"]
    cfg = ModelConfig(*c["dims"], h_l=h, h_v=h, h_a=h, d_f=c["d_f"], d_z=c["d_z"], K=c["K"], dropout=0.0)
    exs = gen_synthetic(GeneratorSpec(n_examples=n, T=T, dims=c["dims"], seed=0))
    return build_variant(cfg), exs


def time_kernel(name, n, T, repeats):
    from rmfn.kernels import pack_inputs, run_batch
    from rmfn.train import task_targets

    params, exs = build(name, n, T)
    X, L = pack_inputs(exs)
    Y = task_targets(params.config, exs)
    t0 = time.perf_counter()
    run_batch(params, X[:1], L[:1], Y[:1])  # includes jit compile or cache load
    warm = time.perf_counter() - t0
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        run_batch(params, X, L, Y)
        best = min(best, time.perf_counter() - t0)
    return {"first_call_s": warm, "batch_s": best, "per_example_ms": 1e3 * best / n}


def time_tape(name, n, T, repeats):
    from rmfn import numcore as nc
    from rmfn.train import example_loss

    params, exs = build(name, n, T)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for ex in exs:
            nc.backward(example_loss(params, params.config, ex, bound=params.bind()))
        best = min(best, time.perf_counter() - t0)
    return {"first_call_s": 0.0, "batch_s": best, "per_example_ms": 1e3 * best / n}


def child(args):
    from rmfn import _accel

    fn = time_tape if args.mode == "tape" else time_kernel
    out = {name: fn(name, args.examples, args.T, args.repeats) for name in CONFIGS}
    out["numba"] = _accel.USE_NUMBA
    print(json.dumps(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--examples", type=int, default=64)
    ap.add_argument("--T", type=int, default=6)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--mode", choices=["numba", "numpy", "tape"], help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.mode:
        return child(args)
    results = {}
    for mode, flag in (("numba", "1"), ("numpy", "0"), ("tape", "0")):
        env = dict(os.environ, RMFN_NUMBA=flag)
        cmd = [sys.executable, __file__, "--mode", mode, "--examples", str(args.examples), "--T", str(args.T),
               "--repeats", str(args.repeats if mode != "tape" else 1)]
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
        results[mode] = json.loads(proc.stdout.strip().splitlines()[-1])
    print(f"forward+backward over {args.examples} examples, T={args.T} (best of {args.repeats})")
    print(f"{'config':<8} {'path':<6} {'first call s':>12} {'batch s':>9} {'ms/example':>11} {'speedup':>8}")
    for name in CONFIGS:
        base = results["numpy"][name]["batch_s"]
        for mode in ("numba", "numpy", "tape"):
            r = results[mode][name]
            print(f"{name:<8} {mode:<6} {r['first_call_s']:12.2f} {r['batch_s']:9.4f} "
                  f"{r['per_example_ms']:11.3f} {base / r['batch_s']:7.1f}x")


if __name__ == "__main__":
    main()
