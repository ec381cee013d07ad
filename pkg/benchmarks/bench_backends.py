"""Numba vs numpy kernel timings on one synthetic layer.

    python benchmarks/bench_backends.py --batch 64 --dffn 512

Both backends produce identical bits; this only measures speed.  The first
numba call compiles (or loads the on-disk cache) and is excluded.
"""
import argparse
import statistics
import time

import numpy as np

from moe_sparsekit import MoEConfig, generate_synthetic, kernels
from moe_sparsekit.calibrate import calibrate, lookup
from moe_sparsekit.engine import forward_dense, forward_sparse, gate_stage


def median_time(fn, repeats):
    fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--experts", type=int, default=16)
    ap.add_argument("--topk", type=int, default=4)
    ap.add_argument("--dmodel", type=int, default=256)
    ap.add_argument("--dffn", type=int, default=512)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--sparsity", type=float, default=0.8)
    ap.add_argument("--repeats", type=int, default=7)
    args = ap.parse_args()

    cfg = MoEConfig(args.experts, args.topk, args.dmodel, args.dffn)
    w = generate_synthetic(cfg, seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.batch, cfg.d_model)).astype(np.float32)
    tau = lookup(calibrate(w, rng.standard_normal((512, cfg.d_model)).astype(np.float32),
                           targets=[args.sparsity]), args.sparsity)
    r, _, act = gate_stage(w, x)
    mask = np.abs(act) >= tau
    flat, _, total = kernels.backend.compact(mask, r.topk_ids, cfg.capacity)

    cases = {
        "batched_matvec (router)": lambda b: b.batched_matvec(w.router, x),
        "compact": lambda b: b.compact(mask, r.topk_ids, cfg.capacity),
        "fused_updown": lambda b: b.fused_updown(x, w.up, w.down_t, act, r.topk_ids, r.topk_weights,
                                                 flat, total, cfg.tile),
        "forward_dense": lambda b: forward_dense(w, x),
        f"forward_sparse (s={args.sparsity})": lambda b: forward_sparse(w, x, tau),
    }
    names = kernels.available_backends()
    print(f"E={cfg.n_experts} K={cfg.top_k} D={cfg.d_model} N={cfg.d_ffn} B={args.batch} tau={tau:.4g}")
    print(f"{'case':34s}" + "".join(f"{n:>14s}" for n in names) + ("      speedup" if len(names) == 2 else ""))
    for label, fn in cases.items():
        row = []
        for name in names:
            with kernels.use_backend(name) as b:
                row.append(median_time(lambda: fn(b), args.repeats))
        line = f"{label:34s}" + "".join(f"{t * 1e3:12.3f}ms" for t in row)
        if len(row) == 2:
            line += f"{row[1] / row[0]:12.2f}x"
        print(line)


if __name__ == "__main__":
    main()
