"""``moe-sparsekit`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O or file
format error, 4 numerical check failure.
"""
from __future__ import annotations

import argparse
import os
import statistics
import sys

import numpy as np

from . import kernels
from .activation import silu, topk_mask
from .budget import BudgetRatios, allocate_budget, apply_budget, group_experts
from .calibrate import (
    DEFAULT_TARGETS,
    CalibrationError,
    build_table,
    collect_magnitudes,
    load_table,
    lookup,
    routed_to_total,
    save_table,
    total_to_routed,
)
from .engine import (
    forward_dense,
    forward_masked_dense,
    forward_sparse,
    profile_tipping,
    routed_activations,
    step,
    wallclock_timer,
)
from .model import ConfigError, MoEConfig, WeightFormatError, generate_synthetic, load_weights, save_weights
from .profiler import emit_report, profile_expert, sweep_cutoff, write_histogram, write_neuron_counts

THREADS_ENV = "MOE_SPARSEKIT_THREADS"
ORACLE_TOL = 1e-5

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class NumericCheckFailed(RuntimeError):
    pass


class InputFormatError(ValueError):
    pass


def _read_table(path):
    try:
        return load_table(path)
    except CalibrationError as exc:
        raise InputFormatError(f"{path}: {exc}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _tokens(n: int, d: int, seed: int) -> np.ndarray:
    """Seeded standard-normal tokens (stand-ins for hidden states)."""
    return np.random.default_rng(seed).standard_normal((n, d)).astype(np.float32)


def _rel_diff(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b), initial=0.0) / max(1.0, float(np.max(np.abs(b), initial=0.0))))


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from None


def _print_kv(pairs) -> None:
    for k, v in pairs:
        if isinstance(v, float):
            v = f"{v:.9g}"
        print(f"{k}: {v}")


# -- gen ---------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = MoEConfig(n_experts=args.experts, top_k=args.topk, d_model=args.dmodel, d_ffn=args.dffn,
                    d_shared=args.shared_dim, renormalize=not args.no_renormalize)
    w = generate_synthetic(cfg, args.seed, args.scale)
    save_weights(w, args.out)
    print(f"wrote {args.out}: experts={cfg.n_experts} topk={cfg.top_k} d_model={cfg.d_model} "
          f"d_ffn={cfg.d_ffn} d_shared={cfg.d_shared} renormalize={cfg.renormalize} seed={args.seed}")
    return 0


# -- calibrate ---------------------------------------------------------------

def cmd_calibrate(args) -> int:
    w = load_weights(args.weights)
    c = w.config
    targets = args.targets
    if len(set(targets)) != len(targets):
        raise ConfigError("duplicate calibration targets")
    x = _tokens(args.tokens, c.d_model, args.seed)
    sample = collect_magnitudes(w, x, args.sample_cap, args.seed)
    table = build_table(sample, targets, c.top_k, c.d_ffn, c.d_shared)
    save_table(table, args.out)
    held_out = _tokens(args.tokens, c.d_model, args.seed + 1)
    print(f"wrote {args.out}: {len(table)} entries from {sample.size} magnitudes")
    print("target\trouted_target\tthreshold\tachieved_routed\tachieved_total")
    for t, tau in table.entries():
        rep = forward_sparse(w, held_out, tau, threads=_threads(args))
        s_r = rep.achieved_routed_sparsity
        print(f"{t:.4f}\t{total_to_routed(t, c.top_k, c.d_ffn, c.d_shared):.4f}\t{tau:.6g}\t"
              f"{s_r:.4f}\t{routed_to_total(s_r, c.top_k, c.d_ffn, c.d_shared):.4f}")
    return 0


# -- run ---------------------------------------------------------------------

def _resolve_tau(args, w) -> float:
    if args.tau is not None:
        if args.tau < 0:
            raise ConfigError("--tau must be >= 0")
        return args.tau
    if args.table:
        table = _read_table(args.table)
    else:
        c = w.config
        sample = collect_magnitudes(w, _tokens(args.calib_tokens, c.d_model, args.seed + 7919),
                                    seed=args.seed)
        table = build_table(sample, [args.sparsity], c.top_k, c.d_ffn, c.d_shared)
    return lookup(table, args.sparsity)


def _budget_masks(w, x, sparsity: float, ratios: BudgetRatios):
    c = w.config
    r, h = routed_activations(w, x)
    masks = np.zeros(h.shape, dtype=bool)
    group_counts = np.zeros(3, dtype=np.int64)
    for t in range(x.shape[0]):
        groups = group_experts(r.topk_weights[t])
        counts = allocate_budget(c.top_k, c.d_ffn, 1.0 - sparsity, groups, ratios)
        masks[t] = apply_budget(h[t], counts)
        for gi, g in enumerate(groups):
            group_counts[gi] += int(counts[list(g)].sum())
    return masks, group_counts


def cmd_run(args) -> int:
    w = load_weights(args.weights)
    c = w.config
    threads = _threads(args)
    if args.dense and (args.budget or args.mode == "R+S" or args.switch):
        raise ConfigError("--dense cannot be combined with --budget, --mode R+S or --switch")
    if args.sparsity is not None and not 0 <= args.sparsity < 1:
        raise ConfigError("--sparsity must be in [0, 1)")
    analysis = bool(args.budget) or args.mode == "R+S"
    if analysis and args.sparsity is None:
        raise ConfigError("--budget and --mode R+S need --sparsity")

    tau = None if args.dense or analysis else _resolve_tau(args, w)
    switch = None
    if args.switch:
        switch = profile_tipping(w, tau, args.switch_grid, args.repeats,
                                 wallclock_timer(w, tau, args.seed, threads))
        print(f"tipping_batch: {switch.tipping_batch}")

    worst = 0.0
    last = None
    for i, b in enumerate(args.batch):
        x = _tokens(b, c.d_model, args.seed + i)
        dense = forward_dense(w, x, threads=threads)
        if args.dense:
            rep = dense
        elif analysis:
            if args.budget:
                ratios = BudgetRatios.parse(args.budget)
                masks, group_counts = _budget_masks(w, x, args.sparsity, ratios)
                print(f"step {i}: budget {args.budget} neurons per group "
                      f"g0={group_counts[0]} g1={group_counts[1]} g2={group_counts[2]}")
                rep = forward_masked_dense(w, x, masks, threads=threads)
            else:
                _, h = routed_activations(w, x)
                sm = None
                if c.has_shared:
                    g = kernels.backend.batched_matvec(w.shared_gate, x)
                    u = kernels.backend.batched_matvec(w.shared_up, x)
                    sm = topk_mask(silu(g) * u, args.sparsity)
                rep = forward_masked_dense(w, x, topk_mask(h, args.sparsity), sm, threads=threads)
        elif switch is not None:
            rep = step(w, x, tau, switch, threads=threads)
        else:
            rep = forward_sparse(w, x, tau, threads=threads)

        if rep.path_used == "sparse":
            mask = rep.buffer.to_masks(rep.routing.topk_ids, c.d_ffn)
            oracle = forward_masked_dense(w, x, mask, threads=threads)
            worst = max(worst, _rel_diff(rep.outputs, oracle.outputs))
            print(f"step {i}: oracle_max_rel_diff: {_rel_diff(rep.outputs, oracle.outputs):.3e}")
        s = rep.summary()
        print(f"step {i}: batch={b} path_used={s['path']} "
              f"achieved_routed_sparsity={s['achieved_routed_sparsity']:.4f} "
              f"tiles={s['tiles_total'] - s['tiles_skipped']}/{s['tiles_total']} "
              f"routed_macs={s['routed_macs']} total_macs={s['total_macs']}")
        print(f"step {i}: max_rel_diff_vs_dense: {_rel_diff(rep.outputs, dense.outputs):.3e}")
        last = rep
    if tau is not None:
        print(f"tau: {tau:.9g}")
    if args.dump_output:
        np.save(args.dump_output, last.outputs)
        print(f"wrote {args.dump_output}")
    if worst > ORACLE_TOL:
        raise NumericCheckFailed(f"sparse path differs from the masked-dense oracle by {worst:.3e}")
    return 0


# -- sweep / profile / bench ---------------------------------------------------

def cmd_sweep(args) -> int:
    w = load_weights(args.weights)
    c = w.config
    x = _tokens(args.tokens, c.d_model, args.seed)
    table = None
    if args.path == "threshold":
        table = _read_table(args.table) if args.table else build_table(
            collect_magnitudes(w, _tokens(args.tokens, c.d_model, args.seed + 7919), seed=args.seed),
            args.targets, c.top_k, c.d_ffn, c.d_shared)
    res = sweep_cutoff(w, x, args.targets, args.retention, args.mode, path=args.path, table=table,
                       threads=_threads(args))
    emit_report(res, args.out)
    for p in res.points:
        print(f"target={p.target:.4f} achieved_total={p.achieved_total:.4f} "
              f"achieved_routed={p.achieved_routed:.4f} quality={p.quality:.6f} rel_error={p.rel_error:.6f}")
    print(f"cutoff: {res.cutoff:.9g}")
    print(f"wrote {args.out}")
    return 0


def cmd_profile(args) -> int:
    w = load_weights(args.weights)
    x = _tokens(args.tokens, w.config.d_model, args.seed)
    prof = profile_expert(w, args.expert, x, args.sparsity, args.bin_width, args.routed_only)
    write_histogram(prof, args.out)
    if args.kept_out:
        write_histogram(prof, args.kept_out, kept=True)
    if args.counts_out:
        write_neuron_counts(prof, args.counts_out)
    counts = prof.per_neuron_counts
    _print_kv([
        ("events", prof.total_events),
        ("histogram_sum", sum(prof.bins.values())),
        ("zero_bin_fraction", prof.zero_bin_fraction()),
        ("never_activated", prof.never_activated),
        ("mean_per_neuron_count", float(counts.mean()) if counts.size else 0.0),
        ("max_per_neuron_count", int(counts.max(initial=0))),
    ])
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    w = load_weights(args.weights)
    c = w.config
    threads = _threads(args)
    x = _tokens(args.batch, c.d_model, args.seed)
    calib = _tokens(args.calib_tokens, c.d_model, args.seed + 7919)
    sample = collect_magnitudes(w, calib, seed=args.seed)
    if args.routed_sparsity is not None:
        table = build_table(sample, [args.routed_sparsity], c.top_k, c.d_ffn, 0)
        tau = lookup(table, args.routed_sparsity)
    else:
        tau = lookup(build_table(sample, [args.sparsity], c.top_k, c.d_ffn, c.d_shared), args.sparsity)
    dense = forward_dense(w, x, threads=threads)
    sparse = forward_sparse(w, x, tau, threads=threads)
    dense_ud = dense.macs.up_macs + dense.macs.down_macs
    sparse_ud = sparse.macs.up_macs + sparse.macs.down_macs
    unpadded_ud = 2 * c.d_model * sparse.active_neurons
    s_pad = 1.0 - sparse.padded_active / (args.batch * c.top_k * c.d_ffn)
    _print_kv([
        ("tau", tau),
        ("achieved_routed_sparsity", sparse.achieved_routed_sparsity),
        ("dense_routed_macs", dense.macs.routed),
        ("sparse_routed_macs", sparse.macs.routed),
        ("updown_reduction_unpadded", dense_ud / unpadded_ud if unpadded_ud else float("inf")),
        ("updown_reduction_padded", dense_ud / sparse_ud if sparse_ud else float("inf")),
        ("routed_mac_ratio", sparse.macs.routed / dense.macs.routed),
        ("theoretical_ratio_(1+2(1-s))/3", (1 + 2 * (1 - s_pad)) / 3),
        ("tiles_skipped", f"{sparse.tiles_skipped}/{sparse.tiles_total}"),
    ])
    timer = wallclock_timer(w, tau, args.seed, threads)
    for path in ("dense", "sparse"):
        ts = [timer(path, args.batch) for _ in range(args.repeats)]
        print(f"median_time_{path}_s (informational): {statistics.median(ts):.6g}")
    print(f"kernel_backend (informational): {kernels.BACKEND_NAME}")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moe-sparsekit", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default ${THREADS_ENV} or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic layer weights")
    g.add_argument("--experts", type=int, required=True)
    g.add_argument("--topk", type=int, required=True)
    g.add_argument("--dmodel", type=int, required=True)
    g.add_argument("--dffn", type=int, required=True)
    g.add_argument("--shared-dim", type=int, default=0)
    g.add_argument("--no-renormalize", action="store_true")
    g.add_argument("--scale", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("calibrate", help="build a target-sparsity threshold table")
    c.add_argument("--weights", required=True)
    c.add_argument("--tokens", type=int, default=4096)
    c.add_argument("--targets", type=_float_list, default=list(DEFAULT_TARGETS))
    c.add_argument("--sample-cap", type=int, default=1 << 17)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run", help="run the layer on seeded tokens")
    r.add_argument("--weights", required=True)
    r.add_argument("--batch", type=_int_list, default=[8], help="one step per comma-separated size")
    r.add_argument("--seed", type=int, default=0)
    how = r.add_mutually_exclusive_group(required=True)
    how.add_argument("--sparsity", type=float, help="target total activation sparsity")
    how.add_argument("--tau", type=float, help="explicit masking threshold")
    how.add_argument("--dense", action="store_true")
    r.add_argument("--table", help="calibration table (default: calibrate on the fly)")
    r.add_argument("--calib-tokens", type=int, default=2048)
    r.add_argument("--mode", choices=("R", "R+S"), default="R")
    r.add_argument("--budget", help="r0:r1:r2 neuron budget ratios (analysis mode)")
    r.add_argument("--switch", action="store_true", help="profile the tipping batch and switch paths")
    r.add_argument("--switch-grid", type=_int_list, default=[1, 2, 4, 8, 16, 32, 64, 128, 256])
    r.add_argument("--repeats", type=int, default=5)
    r.add_argument("--dump-output", help="save the last step's outputs as .npy")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="quality vs sparsity and the retention cutoff")
    s.add_argument("--weights", required=True)
    s.add_argument("--tokens", type=int, default=512)
    s.add_argument("--targets", type=_float_list, default=[0.0, 0.3, 0.6, 0.9])
    s.add_argument("--retention", type=float, default=0.95)
    s.add_argument("--mode", choices=("R", "R+S"), default="R")
    s.add_argument("--path", choices=("topk", "threshold"), default="topk")
    s.add_argument("--table")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("profile", help="activation histogram and per-neuron counts")
    pr.add_argument("--weights", required=True)
    pr.add_argument("--expert", type=int, default=0)
    pr.add_argument("--tokens", type=int, default=2048)
    pr.add_argument("--sparsity", type=float, default=0.95)
    pr.add_argument("--bin-width", type=float, default=0.006)
    pr.add_argument("--routed-only", action="store_true")
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True, help="histogram file (bin_center<TAB>count)")
    pr.add_argument("--kept-out", help="histogram of the survivors")
    pr.add_argument("--counts-out", help="per-neuron survivor counts")
    pr.set_defaults(func=cmd_profile)

    b = sub.add_parser("bench", help="dense vs sparse MAC counts and timings")
    b.add_argument("--weights", required=True)
    b.add_argument("--batch", type=int, default=64)
    sp = b.add_mutually_exclusive_group(required=True)
    sp.add_argument("--sparsity", type=float, help="target total sparsity")
    sp.add_argument("--routed-sparsity", type=float, help="target routed-expert sparsity")
    b.add_argument("--calib-tokens", type=int, default=2048)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WeightFormatError, InputFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericCheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # Remaining argument-range checks raised by the library.
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
