"""Command line interface: serve, bench, compare, capture, build-pack,
gen-workload."""
from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys
from pathlib import Path

from . import bench as bench_mod
from .engine import EngineConfig, GroundTruthParams
from .oracle import OracleConfig
from .profile import build_pack, iter_trace_dir, save_pack_file
from .server import BACKEND_GROUND_TRUTH, BACKEND_ORACLE, ServerConfig, run_server

ENV_ENABLE_ORACLE = "EMU_ENABLE_ORACLE"
ENV_PROFILE_PACK = "EMU_PROFILE_PACK"


def _add_serve(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("serve", help="run the emulated serving endpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8100)
    p.add_argument("--max-model-len", type=int, default=4096)
    p.add_argument("--block-size", type=int, default=16)
    p.add_argument("--num-gpu-blocks", type=int, required=True)
    p.add_argument("--max-num-batched-tokens", type=int, default=512)
    p.add_argument("--max-num-seqs", type=int, default=64)
    p.add_argument(
        "--backend",
        choices=[BACKEND_GROUND_TRUTH, BACKEND_ORACLE],
        default=None,
        help=f"defaults to groundtruth, or oracle when {ENV_ENABLE_ORACLE}=1",
    )
    p.add_argument("--profile-pack", default=None, help=f"overrides {ENV_PROFILE_PACK}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", default=None, help="step trace output path (JSON lines)")
    p.add_argument("--blocking", action="store_true", help="disable async scheduling")
    p.add_argument("--gt-base", type=float, default=0.003)
    p.add_argument("--gt-per-token", type=float, default=4e-5)
    p.add_argument("--gt-per-seq", type=float, default=1.2e-4)
    p.add_argument("--gt-prefill-multiplier", type=float, default=1.25)
    p.add_argument("--gt-noise-cv", type=float, default=0.0)
    p.add_argument("--oracle-floor", type=int, default=32)
    p.add_argument("--oracle-power", type=float, default=2.0)
    p.add_argument("--oracle-epsilon", type=float, default=1e-9)


def server_config_from_args(args: argparse.Namespace) -> ServerConfig:
    """CLI flags plus the EMU_* environment; explicit flags win."""
    backend = args.backend
    if backend is None:
        backend = (
            BACKEND_ORACLE
            if os.environ.get(ENV_ENABLE_ORACLE) == "1"
            else BACKEND_GROUND_TRUTH
        )
    profile_pack = args.profile_pack or os.environ.get(ENV_PROFILE_PACK)
    return ServerConfig(
        engine=EngineConfig(
            num_gpu_blocks=args.num_gpu_blocks,
            block_size=args.block_size,
            max_model_len=args.max_model_len,
            max_num_batched_tokens=args.max_num_batched_tokens,
            max_num_seqs=args.max_num_seqs,
            async_scheduling=not args.blocking,
        ),
        backend=backend,
        profile_pack=profile_pack,
        ground_truth=GroundTruthParams(
            base_s=args.gt_base,
            per_token_s=args.gt_per_token,
            per_seq_s=args.gt_per_seq,
            prefill_multiplier=args.gt_prefill_multiplier,
            noise_cv=args.gt_noise_cv,
        ),
        oracle=OracleConfig(
            reliability_floor=args.oracle_floor,
            shepard_power=args.oracle_power,
            epsilon_distance=args.oracle_epsilon,
        ),
        seed=args.seed,
        trace_path=args.trace,
        host=args.host,
        port=args.port,
    )


def _serve(args: argparse.Namespace) -> int:
    run_server(server_config_from_args(args))
    return 0


def _add_bench(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("bench", help="run an open-loop benchmark against a server")
    p.add_argument("--target", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--burstiness", type=float, default=1.0)
    p.add_argument("--num-prompts", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)


def _bench(args: argparse.Namespace) -> int:
    entries = bench_mod.read_workload(args.workload)
    spec = bench_mod.WorkloadSpec(
        entries=entries,
        request_rate=args.rate,
        burstiness=args.burstiness,
        seed=args.seed,
        num_prompts=args.num_prompts,
    )
    records = asyncio.run(bench_mod.run_benchmark(args.target, spec))
    report = bench_mod.write_report(args.out, spec, records)
    agg = report["metrics"]
    print(f"requests: {len(records)}  duration: {agg['duration_s']:.2f}s  tps: {agg['tps']:.1f}")
    for name in ("ttft", "tpot", "itl", "e2e"):
        stats = agg[name]
        if stats["mean"] is None:
            print(f"{name.upper():<5} (no requests with enough tokens)")
            continue
        print(
            f"{name.upper():<5} mean {stats['mean'] * 1e3:9.2f} ms   "
            f"median {stats['median'] * 1e3:9.2f} ms   p99 {stats['p99'] * 1e3:9.2f} ms"
        )
    print(f"report written to {args.out}")
    return 0


def _add_compare(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("compare", help="relative error between matched runs")
    p.add_argument("--real", action="append", required=True, help="repeatable, one per rate")
    p.add_argument("--emu", action="append", required=True, help="repeatable, one per rate")
    p.add_argument("--label", action="append", default=None, help="column label per pair")
    p.add_argument("--out", required=True, help="output basename; writes .txt and .json")


def _compare(args: argparse.Namespace) -> int:
    if len(args.real) != len(args.emu):
        print("error: need as many --real as --emu", file=sys.stderr)
        return 2
    labels = args.label or []
    columns = []
    for i, (real_path, emu_path) in enumerate(zip(args.real, args.emu)):
        real_report = bench_mod.load_report(real_path)
        emu_report = bench_mod.load_report(emu_path)
        label = labels[i] if i < len(labels) else f"r={real_report['request_rate']:g}"
        columns.append((label, bench_mod.compare_reports(real_report, emu_report)))
    table = bench_mod.render_compare_table(columns)
    out = Path(args.out)
    base = out.with_suffix("") if out.suffix in (".txt", ".json") else out
    base.with_suffix(".txt").write_text(table, encoding="utf-8")
    with open(base.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump({label: report for label, report in columns}, f, indent=2)
    print(table, end="")
    print(f"written to {base.with_suffix('.txt')} and {base.with_suffix('.json')}")
    return 0


def _add_capture(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("capture", help="rate-sweep profile capture against a tracing server")
    p.add_argument("--target", required=True)
    p.add_argument("--rates", required=True, help="comma separated, e.g. 2,4,8")
    p.add_argument(
        "--prompts-per-rate",
        required=True,
        help="single count or comma list matching --rates",
    )
    p.add_argument("--workload", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--trace-dir", required=True)


def _capture(args: argparse.Namespace) -> int:
    rates = [float(r) for r in args.rates.split(",")]
    counts = [int(c) for c in args.prompts_per_rate.split(",")]
    if len(counts) == 1:
        counts = counts * len(rates)
    entries = bench_mod.read_workload(args.workload)
    files = asyncio.run(
        bench_mod.capture_profile(
            args.target, rates, counts, entries, args.seed, args.trace_dir, rounds=args.rounds
        )
    )
    for f in files:
        print(f"trace: {f}")
    return 0


def _add_build_pack(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("build-pack", help="merge trace files into a profile pack")
    p.add_argument("--traces", required=True, help="directory of *.jsonl trace files")
    p.add_argument("--num-gpu-blocks", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--meta", action="append", default=[], help="key=value metadata")


def _build_pack(args: argparse.Namespace) -> int:
    metadata = dict(kv.split("=", 1) for kv in args.meta)
    pack = build_pack(iter_trace_dir(args.traces), args.num_gpu_blocks, metadata)
    save_pack_file(pack, args.out)
    print(json.dumps(pack.stats(), indent=2))
    print(f"pack written to {args.out}")
    return 0


def _add_gen_workload(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("gen-workload", help="generate a synthetic length workload")
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--prompt-median", type=int, required=True)
    p.add_argument("--output-median", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompt-sigma", type=float, default=0.6)
    p.add_argument("--output-sigma", type=float, default=0.7)
    p.add_argument("--max-prompt", type=int, default=2048)
    p.add_argument("--max-output", type=int, default=512)
    p.add_argument("--out", required=True)


def _gen_workload(args: argparse.Namespace) -> int:
    entries = bench_mod.generate_workload(
        num=args.num,
        prompt_median=args.prompt_median,
        output_median=args.output_median,
        seed=args.seed,
        prompt_sigma=args.prompt_sigma,
        output_sigma=args.output_sigma,
        max_prompt=args.max_prompt,
        max_output=args.max_output,
    )
    bench_mod.write_workload(args.out, entries)
    print(f"{len(entries)} entries written to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="serve-emu")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_serve(sub)
    _add_bench(sub)
    _add_compare(sub)
    _add_capture(sub)
    _add_build_pack(sub)
    _add_gen_workload(sub)
    args = parser.parse_args(argv)
    handlers = {
        "serve": _serve,
        "bench": _bench,
        "compare": _compare,
        "capture": _capture,
        "build-pack": _build_pack,
        "gen-workload": _gen_workload,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
