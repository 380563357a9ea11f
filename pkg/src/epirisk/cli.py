"""Command-line frontend: deterministic simulations, noise-table
reproduction, and PIR micro-benchmarks. Every subcommand takes an explicit
seed; nothing is ever seeded from the wall clock."""

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kernels, pir, privacy
from .core import Tiling
from .cuckoo import CuckooParams
from .pir import CapacityError, PirServer, build_pir_db, combine, gen_query
from .simnet import ScenarioError, bandwidth_report, load_scenario, run


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def cmd_simulate(args) -> int:
    if not os.path.exists(args.scenario):
        print(f"error: scenario file not found: {args.scenario}", file=sys.stderr)
        return 2
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return 2
    if args.dp_epsilon is not None:
        scenario.dp_epsilon = args.dp_epsilon
    if args.dp_delta is not None:
        scenario.dp_delta = args.dp_delta
    if args.dp_sensitivity is not None:
        scenario.dp_sensitivity = args.dp_sensitivity
    if args.block_cap is not None:
        scenario.block_cap = args.block_cap
    try:
        metrics = run(scenario, seed=args.seed)
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write(metrics.to_csv())
    with open(os.path.join(args.out, "payload_sizes.csv"), "w") as fh:
        fh.write("day,loc,bytes\n")
        for day, loc, size in metrics.payload_sizes:
            fh.write(f"{day},{loc:08x},{size}\n")
    report = bandwidth_report(metrics, scenario)
    summary = metrics.summary_text()
    summary += f"broadcast bytes total:     {report['broadcast_bytes_total']}\n"
    for user, q in sorted(report["per_user_query"].items()):
        summary += (
            f"query {user}: tiles={q['tiles']} upload_bytes={q['query_upload_bytes']}"
            f" down_bytes={q['query_down_bytes']} blocks={q['blocks']}\n"
        )
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(summary)
    print(summary, end="")
    return 0


def cmd_dp_table(args) -> int:
    if args.samples < 100_000:
        print("error: --samples must be at least 100000", file=sys.stderr)
        return 2
    print(f"{'epsilon':>8} {'delta':>8} {'t':>10} {'p99 analytic':>14} {'p99 empirical':>14}")
    for i, eps in enumerate(args.epsilon):
        for j, delta in enumerate(args.delta):
            params = privacy.dp_params(eps, delta, args.sensitivity)
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence([args.seed & 0xFFFFFFFF, i, j]))
            )
            draws = privacy.sample_junk_count(params, rng, size=args.samples)
            empirical = int(np.percentile(draws, 99.0))
            analytic = privacy.junk_count_percentile(params, 0.99)
            print(f"{eps:>8g} {delta:>8g} {params.t:>10d} {analytic:>14d} {empirical:>14d}")
    return 0


def _bench_tiling(tiles: int) -> Tiling:
    bits = max(1, (tiles - 1).bit_length())
    l_bits = min((bits + 1) // 2 + 1, 14)
    m_bits = max(bits - l_bits, 0)
    return Tiling(m_bits=m_bits, l_bits=l_bits)


def _build_bench_db(args, tiling: Tiling):
    rng = np.random.Generator(np.random.PCG64([args.seed & 0xFFFFFFFF, 0xBE]))
    dp = privacy.dp_params(1.0, 0.05, 8)
    entries = {}
    for tile in range(min(args.tiles, tiling.domain_size)):
        n = int(rng.integers(0, 40))
        entries[tile] = [rng.bytes(15) for _ in range(n)]
    return build_pir_db(
        entries, tiling, args.block_cap, dp, CuckooParams(), payload_id=1, seed=args.seed
    )


def cmd_pir_bench(args) -> int:
    tiling = _bench_tiling(args.tiles)
    try:
        db = _build_bench_db(args, tiling)
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rng = np.random.default_rng(args.seed)
    print(
        f"db: {args.tiles} tiles over a {tiling.domain_size}-tile domain, "
        f"{db.num_blocks} unique blocks, b_max={db.b_max} bytes"
    )

    # correctness: exhaustive over small domains, sampled otherwise
    fold = not args.no_dedup
    targets = (
        range(tiling.domain_size)
        if tiling.domain_size <= 64
        else rng.integers(0, tiling.domain_size, 64)
    )
    failures = 0
    for target in targets:
        got = pir.retrieve(db, int(target), rng, fold=fold)
        want = db.block_for_tile(int(target))
        if got[: len(want)] != want or any(got[len(want) :]):
            failures += 1
    n_targets = len(targets)
    print(f"correctness: {n_targets - failures}/{n_targets} targets retrieved exactly")
    if failures:
        return 1

    # dedup-folding equivalence and work comparison
    s_fold, s_rep = PirServer(db), PirServer(db)
    q1, q2 = gen_query(0, tiling.domain_size, rng)
    same = combine(s_fold.answer(q1, fold=True), s_fold.answer(q2, fold=True)) == combine(
        s_rep.answer(q1, fold=False), s_rep.answer(q2, fold=False)
    )
    print(
        f"dedup: identical blocks={same}; XOR work per query: "
        f"{s_fold.blocks_xored // 2} folded vs {s_rep.blocks_xored // 2} replicated"
    )

    if args.trials > 0:
        queries = [gen_query(int(t), tiling.domain_size, rng)[0]
                   for t in rng.integers(0, tiling.domain_size, args.trials)]
        impls = ["numpy", "numba"] if args.compare_impls else [None]
        for impl in impls:
            if impl is not None and impl not in _kernels.IMPLS:
                print(f"{impl}: unavailable")
                continue
            eval_fold = _kernels.IMPLS[impl]["pir_fold"] if impl else _kernels.pir_fold
            eval_xor = _kernels.IMPLS[impl]["pir_eval"] if impl else _kernels.pir_eval

            def answer(share):
                folded = eval_fold(db.layout, share, db.num_blocks)
                out = np.zeros((db.b_max + 7) // 8, np.uint64)
                eval_xor(db._words, db._offsets, db._word_lens, folded, out)
                return out

            answer(queries[0])  # warm any jit path
            t0 = time.perf_counter()
            if args.workers > 1:
                with ThreadPoolExecutor(max_workers=args.workers) as pool:
                    list(pool.map(answer, queries))
            else:
                for q in queries:
                    answer(q)
            dt = time.perf_counter() - t0
            label = impl or _kernels.ACTIVE_IMPL
            blocks = db.num_blocks * args.trials
            mb = db._words.nbytes * args.trials / 1e6
            print(
                f"throughput[{label}]: {args.trials} queries in {dt:.3f}s "
                f"({blocks / dt:,.0f} blocks/s, {mb / dt:,.1f} MB/s XORed)"
            )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epirisk", description="risk notification protocol simulator and benchmarks"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run a scenario deterministically")
    p_sim.add_argument("--scenario", required=True, help="path to the scenario JSON")
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--dp-epsilon", type=float, default=None)
    p_sim.add_argument("--dp-delta", type=float, default=None)
    p_sim.add_argument("--dp-sensitivity", type=int, default=None)
    p_sim.add_argument("--block-cap", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_dp = sub.add_parser("dp-table", help="empirical vs analytic 99th percentile noise")
    p_dp.add_argument("--epsilon", type=_float_list, default=[0.5, 0.2, 0.1, 0.05])
    p_dp.add_argument("--delta", type=_float_list, default=[0.001, 0.01])
    p_dp.add_argument("--sensitivity", type=int, default=2016)
    p_dp.add_argument("--samples", type=int, default=1_000_000)
    p_dp.add_argument("--seed", type=int, default=0)
    p_dp.set_defaults(func=cmd_dp_table)

    p_pb = sub.add_parser("pir-bench", help="PIR correctness and XOR throughput")
    p_pb.add_argument("--tiles", type=int, default=64)
    p_pb.add_argument("--block-cap", type=int, default=1 << 16)
    p_pb.add_argument("--trials", type=int, default=100)
    p_pb.add_argument("--seed", type=int, default=0)
    p_pb.add_argument("--no-dedup", action="store_true", help="evaluate without query folding")
    p_pb.add_argument("--workers", type=int, default=1)
    p_pb.add_argument("--compare-impls", action="store_true",
                      help="time both the numba and pure-numpy kernels")
    p_pb.set_defaults(func=cmd_pir_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
