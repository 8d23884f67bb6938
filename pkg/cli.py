"""
rowguard command line.

    python cli.py gen-trace --spec mix.json --seed 7 --out trace.jsonl
    python cli.py simulate --mode aegis --trace trace.jsonl --out-dir runs/aegis
    python cli.py sweep --axis chunk_rows --values 8 16 32 64 --trace trace.jsonl
    python cli.py verify --mode buddy --trace trace.jsonl --verify-every 1000
    python cli.py grt --addressing complex --histogram --check
    python cli.py report runs/*/summary.json --pdf comparison.pdf

Exit codes: 0 ok, 1 isolation/audit failure (or unsupported run with
--strict), 2 usage, configuration or trace error.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from core.allocator import MODES
from core.baselines import create_allocator
from core.config import RunConfig, System, load_config
from core.dram import ChunkMap, GlobalRowTable, verify_transform_invariants
from core.errors import ConfigError, MetricsError, RowguardError, TraceError
from core.metrics import compare, export, read_summary, summarize
from core.report import generate_run_report, now_date_str
from core.review import recommendations, review_run
from core.workload import ReplayResult, TraceEvent, generate_mix, read_trace, replay, write_trace

logger = logging.getLogger("rowguard")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SWEEP_AXES = ("chunk_rows", "n_guard")


def _overrides(args: argparse.Namespace) -> Dict:
    get = vars(args).get
    threshold = get("threshold_mb")
    return {
        "seed": get("seed"),
        "dram.mode": get("addressing"),
        "allocator.mode": get("mode"),
        "allocator.chunk_rows": get("chunk_rows"),
        "allocator.n_guard": get("n_guard"),
        "allocator.switch_threshold_bytes": int(threshold * (1 << 20)) if threshold is not None else None,
        "allocator.expansion_enabled": False if get("no_expand") else None,
        "allocator.zonelets_enabled": False if get("no_zonelets") else None,
        "allocator.shrink_enabled": False if get("no_shrink") else None,
        "workload.trace": get("trace"),
        "workload.spec": get("spec"),
        "output.out_dir": get("out_dir"),
        "output.sample_interval": get("sample_interval"),
        "output.pdf": get("pdf"),
        "verify.verify_every": get("verify_every"),
        "verify.blast_radius": get("blast_radius"),
        "verify.report": get("report"),
    }


def _events(config: RunConfig, system: System) -> List[TraceEvent]:
    if config.workload.trace:
        return read_trace(config.workload.trace)
    return generate_mix(config.mix(), system.geo)


def _run(config: RunConfig, system: System, events: Sequence[TraceEvent], label: Optional[str] = None):
    allocator = create_allocator(system.geo, system.grt, system.params)
    result = replay(
        events,
        allocator,
        sample_interval=config.output.sample_interval,
        verify_every=config.verify.verify_every,
        blast_radius=config.verify.blast_radius,
        subarray_rows=system.subarray_rows,
    )
    summary = summarize(
        result.timeline,
        supported=result.supported,
        mode=system.params.mode,
        label=label,
        oom_events=result.oom_events,
    )
    summary["violations"] = result.violations
    summary["audit_findings"] = len(result.findings)
    static, dynamic = allocator.metadata_size()
    summary["metadata_static_bytes"] = static
    summary["metadata_dynamic_bytes"] = dynamic
    return allocator, result, summary


def _print_table(rows) -> None:
    print(compare(rows).to_string(index=False))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_trace(args: argparse.Namespace, config: RunConfig) -> int:
    if not config.workload.spec and not config.workload.mix:
        raise ConfigError("workload.spec", "gen-trace needs --spec or a workload.mix section")
    events = generate_mix(config.mix(), config.geometry())
    if args.out:
        write_trace(events, args.out)
        print(f"wrote {len(events)} events to {args.out}")
    else:
        sys.stdout.writelines(ev.to_json() + "\n" for ev in events)
    return EXIT_OK


def _write_run(config: RunConfig, system: System, allocator, result: ReplayResult, summary: Dict) -> List:
    out = Path(config.output.out_dir)
    export(result.timeline, out / "timeline.csv")
    export(summary, out / "summary.json")
    (out / "state.json").write_text(json.dumps(allocator.export_state(), indent=2) + "\n", encoding="utf-8")
    checks = review_run(result, system.params, summary)
    recs = recommendations(summary, system.params)
    (out / "review.json").write_text(
        json.dumps({"checks": [c.to_dict() for c in checks], "recommendations": recs}, indent=2) + "\n",
        encoding="utf-8",
    )
    if config.output.pdf:
        payload = {
            "title": "rowguard",
            "date_str": now_date_str(),
            "config": {"mode": system.params.mode, "addressing": system.transforms.mode, **system.params.to_dict()},
            "section_status": [c.to_dict() for c in checks],
            "numbers": {k: v for k, v in summary.items() if k not in ("mode", "label")},
            "comparison": compare([summary]).to_dict(orient="records"),
            "recommendations": recs,
        }
        Path(config.output.pdf).write_bytes(generate_run_report(payload))
    return checks


def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    system = config.build()
    events = _events(config, system)
    allocator, result, summary = _run(config, system, events)
    checks = _write_run(config, system, allocator, result, summary)
    _print_table([summary])
    for check in checks:
        print(f"[{check.level}] {check.title}: {check.details[0] if check.details else ''}")
    if not result.secure:
        return EXIT_FAIL
    if args.strict and not result.supported:
        return EXIT_FAIL
    return EXIT_OK


def _sweep_one(job: Tuple[RunConfig, str, int, List[TraceEvent], GlobalRowTable]) -> Dict:
    config, axis, value, events, grt = job
    config = replace(config, allocator={**config.allocator, axis: value})
    system = config.build(grt)
    _, _, summary = _run(config, system, events, label=f"{axis}={value}")
    summary[axis] = value
    return summary


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    system = config.build()
    events = _events(config, system)
    jobs = [(config, args.axis, v, events, system.grt) for v in args.values]
    logger.info("sweeping %s over %s", args.axis, args.values)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(_sweep_one, jobs))
    else:
        summaries = [_sweep_one(job) for job in jobs]
    table = compare(summaries)
    table.insert(0, args.axis, [s[args.axis] for s in summaries])
    out = Path(config.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / f"sweep_{args.axis}.csv", index=False)
    print(table.to_string(index=False))
    return EXIT_FAIL if any(s["violations"] or s["audit_findings"] for s in summaries) else EXIT_OK


def cmd_verify(args: argparse.Namespace, config: RunConfig) -> int:
    system = config.build()
    events = _events(config, system)
    _, result, _ = _run(config, system, events)
    report = {
        "mode": system.params.mode,
        "addressing": system.transforms.mode,
        "blast_radius": config.verify.blast_radius,
        "ok": result.secure,
        "violations": result.violations,
        "checkpoints": [r.to_dict() for r in result.checks],
        "domains": result.domains,
    }
    if config.verify.report:
        path = Path(config.verify.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    names = {v: k for k, v in result.domains.items()}
    if result.secure:
        print(f"ok: {len(result.checks)} checkpoint(s), no violations, no audit findings")
        return EXIT_OK
    print(f"FAILED: {result.violations} violating row pairs, {len(result.findings)} audit findings")
    for r in result.checks:
        for v in r.violations[:10]:
            print(
                f"  t={r.tick} {v.rank_parity}/{v.side} rows {v.row1}/{v.row2} "
                f"domains {names.get(v.domain1, v.domain1)}/{names.get(v.domain2, v.domain2)} "
                f"pfns {v.pfn1}/{v.pfn2}"
            )
        for f in r.findings[:10]:
            print(f"  t={r.tick} audit: {f}")
    return EXIT_FAIL


def cmd_grt(args: argparse.Namespace, config: RunConfig) -> int:
    system = config.build()
    grt = system.grt
    print(f"addressing: {system.transforms.mode}")
    print(f"logical rows: {grt.n_logical} ({grt.rows_per_logical} row-IDs each, {grt.short_orbits} short orbits)")
    print(f"serialized size: {grt.serialized_bytes} bytes")
    status = EXIT_OK
    if args.dump:
        grt.frame().to_csv(args.dump, index=False)
        print(f"wrote {args.dump}")
    if args.histogram:
        chunks = ChunkMap(system.geo, grt, system.params.chunk_rows)
        hist = chunks.neighbor_histogram()
        print(f"neighbor histogram over {chunks.n_chunks} chunks of {system.params.chunk_rows} logical rows:")
        for count, n in sorted(hist.items()):
            print(f"  {count} neighbors: {n} ({100 * n / chunks.n_chunks:.1f}%)")
    if args.check:
        report = verify_transform_invariants(grt, system.transforms, system.geo)
        for res in report.results:
            extra = f" (counterexample {res.counterexample})" if res.counterexample is not None else ""
            print(f"  {res.name}: {'pass' if res.passed else 'FAIL'}{extra}")
        if not report.passed:
            status = EXIT_FAIL
    return status


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    summaries = [read_summary(p) for p in args.summaries]
    table = compare(summaries)
    print(table.to_string(index=False))
    if args.pdf:
        payload = {
            "title": "rowguard",
            "date_str": now_date_str(),
            "comparison": table.to_dict(orient="records"),
            "recommendations": [],
        }
        Path(args.pdf).write_bytes(generate_run_report(payload))
        print(f"wrote {args.pdf}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _run_flags(p: argparse.ArgumentParser):
    p.add_argument("--mode", choices=MODES, help="allocator configuration (default aegis)")
    p.add_argument("--addressing", choices=("simple", "complex"), help="DRAM row address transformations")
    p.add_argument("--chunk-rows", type=int, help="logical global rows per chunk")
    p.add_argument("--n-guard", type=int, help="guard rows in front of every zone")
    p.add_argument("--threshold-mb", type=float, help="zone/zonelet switch threshold in MiB")
    p.add_argument("--no-expand", action="store_true", help="disable zone expansion")
    p.add_argument("--no-zonelets", action="store_true", help="disable zonelets")
    p.add_argument("--no-shrink", action="store_true", help="disable zone shrink/split")
    p.add_argument("--trace", help="JSON-Lines trace to replay")
    p.add_argument("--spec", help="MixSpec JSON to generate the trace from")
    p.add_argument("--out-dir", help="directory for timeline/summary/state files")
    p.add_argument("--sample-interval", type=int, help="ticks between metric samples")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rowguard", description="Rowhammer-isolating allocator simulator.")
    parser.add_argument("--config", help="RunConfig JSON file")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    parser.add_argument("--seed", type=int, help="RNG seed (falls back to $ROWGUARD_SEED, then 0)")
    # an absent subcommand --seed must not reset the top-level one
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", parents=[seeded], help="generate a trace from a workload mix")
    p.add_argument("--spec", help="MixSpec JSON file")
    p.add_argument("--out", help="output trace file (default stdout)")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("simulate", parents=[seeded], help="replay a trace and write metrics")
    _run_flags(p)
    p.add_argument("--strict", action="store_true", help="exit 1 when the run hits out-of-memory")
    p.add_argument("--pdf", help="also write a PDF run report")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", parents=[seeded], help="replay one trace per parameter value")
    _run_flags(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", type=int, nargs="+", required=True)
    p.add_argument("--jobs", type=int, default=1, help="parallel replays")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", parents=[seeded], help="replay with periodic isolation checks")
    _run_flags(p)
    p.add_argument("--verify-every", type=int, help="events between checkpoints (0 = end only)")
    p.add_argument("--blast-radius", type=int, help="rows of disturbance to defend against (default 2)")
    p.add_argument("--report", help="write the verification report as JSON")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("grt", help="inspect the global row table")
    p.add_argument("--addressing", choices=("simple", "complex"))
    p.add_argument("--mode", choices=MODES, help="mode whose chunk size the histogram uses")
    p.add_argument("--chunk-rows", type=int)
    p.add_argument("--dump", help="write the GRT as CSV")
    p.add_argument("--histogram", action="store_true", help="chunk neighbor-count histogram")
    p.add_argument("--check", action="store_true", help="verify the transform invariants")
    p.set_defaults(func=cmd_grt)

    p = sub.add_parser("report", help="compare run summaries")
    p.add_argument("summaries", nargs="+", help="summary.json files")
    p.add_argument("--pdf", help="write the comparison as PDF")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, _overrides(args))
        return args.func(args, config)
    except (ConfigError, TraceError, MetricsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RowguardError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
