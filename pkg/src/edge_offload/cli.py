"""Command line entry point: run, compare, report, worker.

Exit codes: 0 success, 2 configuration or usage error, 3 backend error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from .config import ENV_LOG_LEVEL, ScenarioConfig, load_config
from .errors import BackendUnavailable, BindFailure, ConfigInvalid, EdgeOffloadError, MissingArtifacts
from .metrics import percentile
from .model import ExperimentReport, NodeCategory, NodeSpec, StrategyKind, from_json
from .report import EVENTS_FILE, METRICS_FILE, OUTCOMES_FILE, REPORT_FILE, read_outcomes_csv, report_json, write_outcomes_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3

log = logging.getLogger("edge_offload")


def _strategy(text: str) -> StrategyKind:
    try:
        return StrategyKind.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _scenario(args: argparse.Namespace, strategy: StrategyKind | None = None) -> ScenarioConfig:
    config = load_config(args.config)
    changes = {}
    if strategy is not None:
        changes["strategy"] = strategy.value
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["output_dir"] = args.out
    return config.with_updates(**changes) if changes else config


def execute_run(config: ScenarioConfig, out_dir: Path) -> ExperimentReport:
    """Run one experiment on a fresh backend and write the four artifacts into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / EVENTS_FILE, "w") as events:
        if config.backend == "sim":
            from .simulator import Simulator

            result = Simulator(config, keep_history=True, event_sink=events).run()
        else:
            from .live import run_live_experiment

            result = asyncio.run(run_live_experiment(config, event_sink=events))
    (out_dir / REPORT_FILE).write_text(report_json(result.report))
    write_outcomes_csv(out_dir / OUTCOMES_FILE, result.outcomes)
    result.store.write_csv(out_dir / METRICS_FILE)
    return result.report


def cmd_run(args: argparse.Namespace) -> int:
    strategy = args.strategy[0] if args.strategy else None
    config = _scenario(args, strategy)
    out = Path(config.output_dir)
    report = execute_run(config, out)
    print(format_table([report]))
    print(f"artifacts written to {out}")
    return EXIT_BACKEND if report.aborted else EXIT_OK


def _delta(new: float, old: float) -> str:
    if old == 0:
        return "n/a"
    return f"{(new - old) / old * 100.0:+.1f}%"


def format_table(reports: Sequence[ExperimentReport]) -> str:
    header = f"{'Strategy':<16}{'Avg RT (ms)':>13}{'99th% (ms)':>13}{'Energy (mJ)':>13}{'Drops':>8}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.strategy_name:<16}{r.avg_rt_ms:>13.1f}{r.p99_rt_ms:>13.1f}{r.energy_per_task_mj:>13.0f}{r.drop_count:>8d}"
        )
    base = reports[0]
    for r in reports[1:]:
        lines.append(
            f"{r.strategy_name} vs {base.strategy_name}: avg RT {_delta(r.avg_rt_ms, base.avg_rt_ms)}, "
            f"99th% {_delta(r.p99_rt_ms, base.p99_rt_ms)}, energy {_delta(r.energy_per_task_mj, base.energy_per_task_mj)}, "
            f"drops {r.drop_count - base.drop_count:+d}"
        )
    return "\n".join(lines)


def cmd_compare(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    strategies = args.strategy or [StrategyKind.STATIC_SPLIT, StrategyKind.POD_LEVEL]
    if len(strategies) < 2:
        parser.error("compare needs at least two strategies")
    reports = []
    for i, strategy in enumerate(strategies):
        config = _scenario(args, strategy)
        out = Path(config.output_dir) / f"{i}_{strategy.value}"
        reports.append(execute_run(config, out))
    print(format_table(reports))
    return EXIT_BACKEND if any(r.aborted for r in reports) else EXIT_OK


def _phase_labels(rfs: Sequence[int]) -> list[str]:
    hi, lo = max(rfs), min(rfs)
    labels = []
    for rf in rfs:
        if rf == hi and hi != lo:
            labels.append("peak")
        elif rf == lo and hi != lo:
            labels.append("low")
        else:
            labels.append("moderate")
    return labels


def _summary_lines(rows: list[dict]) -> list[str]:
    done = [r for r in rows if not r["dropped"]]
    drops = len(rows) - len(done)
    rts = [r["rt_ms"] for r in done]
    lines = [f"  tasks: {len(rows)}", f"  drops: {drops}"]
    if rts:
        lines.append(f"  avg RT: {sum(rts) / len(rts):.1f} ms")
        lines.append(f"  99th%: {percentile(rts, 99):.1f} ms")
        lines.append(f"  energy/task: {sum(r['energy_mj'] for r in done) / len(done):.0f} mJ")
    return lines


def render_report(run_dir: Path) -> str:
    report_path = run_dir / REPORT_FILE
    outcomes_path = run_dir / OUTCOMES_FILE
    missing = [p.name for p in (report_path, outcomes_path) if not p.is_file()]
    if missing:
        raise MissingArtifacts(f"{run_dir}: missing {', '.join(missing)}")
    report: ExperimentReport = from_json(ExperimentReport, json.loads(report_path.read_text()))
    rows = read_outcomes_csv(outcomes_path)

    out = [
        f"strategy: {report.strategy_name}",
        f"tasks: {report.total_tasks} (completed {report.completed_count}, in flight {report.in_flight_count})",
        f"drops: {report.drop_count}",
        f"avg RT: {report.avg_rt_ms:.1f} ms",
        f"99th%: {report.p99_rt_ms:.1f} ms",
        f"energy/task: {report.energy_per_task_mj:.0f} mJ",
    ]
    if report.aborted:
        out.append("run aborted: partial results")
    phases = report.phases
    labels = _phase_labels([p["rf"] for p in phases]) if phases else []
    for i, (phase, label) in enumerate(zip(phases, labels)):
        members = [r for r in rows if phase["start_ms"] <= r["dispatch_ms"] < phase["end_ms"]]
        out.append("")
        out.append(f"phase {i + 1} ({label}, rf={phase['rf']}, {phase['offered_rate']:.0f} req/s)")
        out.extend(_summary_lines(members))
    by_category: dict[str, list[dict]] = defaultdict(list)
    for r in rows:
        if r["pod_id"] is not None:
            by_category[report.pods.get(r["pod_id"], "unknown")].append(r)
    for c in NodeCategory:
        if c.value not in by_category and c not in report.per_category_utilization:
            continue
        out.append("")
        util = report.per_category_utilization.get(c, 0.0)
        out.append(f"category {c.value} (cpu {util * 100:.1f}%)")
        out.extend(_summary_lines(by_category.get(c.value, [])))
    return "\n".join(out)


def cmd_report(args: argparse.Namespace) -> int:
    print(render_report(Path(args.run_dir)))
    return EXIT_OK


def cmd_worker(args: argparse.Namespace) -> int:
    from .live import serve_worker

    spec = NodeSpec.default(args.category, args.node_id)
    if args.config:
        for node in load_config(args.config).nodes:
            if node.category == args.category:
                spec = node.spec()
                break
    serve_worker(spec, args.host, args.port, args.pod_id, args.seed or 0)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edge-offload", description="Heterogeneous edge offloading experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="scenario JSON file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")

    run = sub.add_parser("run", help="run one scenario")
    common(run)
    run.add_argument("--strategy", type=_strategy, action="append", help="static_split, category_argmin or pod_level")

    compare = sub.add_parser("compare", help="run several strategies on the same scenario and seed")
    common(compare)
    compare.add_argument("--strategy", type=_strategy, action="append", help="repeat for each strategy (at least two)")

    report = sub.add_parser("report", help="summarise a finished run directory")
    report.add_argument("run_dir")

    worker = sub.add_parser("worker", help="serve one emulated pod over HTTP")
    worker.add_argument("--category", type=NodeCategory, choices=list(NodeCategory), default=NodeCategory.SMALL)
    worker.add_argument("--host", default="127.0.0.1")
    worker.add_argument("--port", type=int, default=8080)
    worker.add_argument("--node-id")
    worker.add_argument("--pod-id")
    worker.add_argument("--config", help="take the node parameters for --category from this scenario")
    worker.add_argument("--seed", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get(ENV_LOG_LEVEL, "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "compare":
            return cmd_compare(args, parser)
        if args.command == "report":
            return cmd_report(args)
        return cmd_worker(args)
    except (ConfigInvalid, MissingArtifacts) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendUnavailable, BindFailure, EdgeOffloadError, OSError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
