"""Benchmark the compiled kernel lane against the numpy reference lane.

Times each kernel on model-realistic shapes, then (optionally) times a short
end-to-end training loop in a subprocess per lane, since the lane is fixed at
import time.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --reps 50 --end-to-end
"""

import argparse
import statistics
import subprocess
import sys
import time

import numpy as np

from cladapt.kernels import reference

try:
    from cladapt.kernels import compiled
except ImportError:
    compiled = None


def _time(fn, args, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(rng):
    d = 64
    n_tok = 5
    batch = 16
    heads = 8
    hd = d // heads
    rows = batch * n_tok

    x_rows = rng.standard_normal((rows, d))
    w_sq = rng.standard_normal((d, d))
    w_mlp = rng.standard_normal((d, 4 * d))
    score_rows = rng.standard_normal((batch * heads * n_tok, n_tok))
    probs = np.abs(score_rows) + 0.1
    probs /= probs.sum(axis=1, keepdims=True)
    gamma = rng.standard_normal(d)
    beta = rng.standard_normal(d)
    hidden = rng.standard_normal((rows, 4 * d))
    bmm_a = rng.standard_normal((batch * heads, n_tok, n_tok))
    bmm_b = rng.standard_normal((batch * heads, n_tok, hd))
    _, mu, rstd = reference.layernorm(x_rows, gamma, beta, 1e-5)

    cases = [
        ("matmul  (80x64)@(64x64)", "matmul", (x_rows, w_sq)),
        ("matmul  (80x64)@(64x256)", "matmul", (x_rows, w_mlp)),
        ("matmul  bmm (128x5x5)@(128x5x8)", "matmul", (bmm_a, bmm_b)),
        ("softmax (640x5)", "softmax", (score_rows,)),
        ("softmax_backward", "softmax_backward", (probs, score_rows)),
        ("layernorm (80x64)", "layernorm", (x_rows, gamma, beta, 1e-5)),
        ("layernorm_backward", "layernorm_backward",
         (x_rows, gamma, mu, rstd, x_rows)),
        ("sigmoid (80x256)", "sigmoid", (hidden,)),
        ("gelu    (80x256)", "gelu", (hidden,)),
        ("gelu_backward", "gelu_backward", (hidden, hidden)),
    ]
    return cases


def bench_kernels(reps):
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    print("%-34s %12s %12s %8s" % ("kernel", "numpy (us)", "compiled (us)", "ratio"))
    for label, name, args in cases:
        t_ref = _time(getattr(reference, name), args, reps)
        if compiled is None:
            print("%-34s %12.1f %12s %8s" % (label, t_ref * 1e6, "n/a", "n/a"))
            continue
        t_cmp = _time(getattr(compiled, name), args, reps)
        ratio = t_ref / t_cmp if t_cmp > 0 else float("inf")
        print("%-34s %12.1f %12.1f %7.2fx" % (label, t_ref * 1e6, t_cmp * 1e6, ratio))
        out_ref = getattr(reference, name)(*args)
        out_cmp = getattr(compiled, name)(*args)
        if not isinstance(out_ref, tuple):
            out_ref, out_cmp = (out_ref,), (out_cmp,)
        for r, c in zip(out_ref, out_cmp):
            if not np.allclose(r, c, rtol=1e-10, atol=1e-12):
                print("  WARNING: lanes disagree on %s" % label)
                break


_E2E_SNIPPET = """
import time
from cladapt.backbone import preset_config, pretrain_surrogate
from cladapt.data import SyntheticDomainSpec, generate_domain
from cladapt.training import TrainConfig, build_method, train_domain
import cladapt.kernels as K

spec = SyntheticDomainSpec(kind="generic", num_classes=6, samples_per_class=20, seed=0)
train, val = generate_domain(spec)
net = pretrain_surrogate(preset_config("tiny"), spec, seed=0)
model = build_method("ours", net)
model.begin_stage(6, seed=0)
cfg = TrainConfig(epochs=2, seed=0)
t0 = time.perf_counter()
train_domain(model, train, val, cfg, stage_seed=0)
print("%s %.3f" % (K.BACKEND, time.perf_counter() - t0))
"""


def bench_end_to_end():
    print()
    print("end-to-end: 2 epochs of gated-adapter training, tiny backbone")
    for lane in ("numpy", "compiled"):
        proc = subprocess.run(
            [sys.executable, "-c", _E2E_SNIPPET],
            capture_output=True, text=True,
            env={"CL_ADAPT_BACKEND": lane, "PATH": "/usr/bin:/bin:/usr/local/bin"},
        )
        if proc.returncode != 0:
            print("%-10s failed:\n%s" % (lane, proc.stderr.strip()))
            continue
        backend, secs = proc.stdout.split()
        print("%-10s %8.3f s  (backend=%s)" % (lane, float(secs), backend))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=30, help="timing repetitions per kernel")
    ap.add_argument("--end-to-end", action="store_true",
                    help="also time a short training loop per lane (subprocesses)")
    args = ap.parse_args()

    if compiled is None:
        print("compiled lane unavailable; showing reference timings only")
    bench_kernels(args.reps)
    if args.end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
