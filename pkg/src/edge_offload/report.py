"""ExperimentReport assembly and the on-disk run artifacts."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import ConservationError
from .metrics import percentile
from .model import ExperimentReport, NodeCategory, TaskOutcome, to_json

REPORT_FILE = "report.json"
OUTCOMES_FILE = "outcomes.csv"
METRICS_FILE = "metrics.csv"
EVENTS_FILE = "mapek_events.jsonl"
OUTCOMES_CSV_HEADER = ["task_id", "pod_id", "dispatch_ms", "rt_ms", "energy_mj", "dropped"]


def build_report(
    strategy_name: str,
    outcomes: Sequence[TaskOutcome],
    total_tasks: int,
    in_flight: int,
    utilization: dict[NodeCategory, float],
    timeline: list[dict[str, Any]] | None = None,
    phases: list[dict[str, Any]] | None = None,
    pods: dict[str, str] | None = None,
    aborted: bool = False,
) -> ExperimentReport:
    """Aggregate outcomes; raises ConservationError unless generated = completed + dropped + in flight."""
    done = [o for o in outcomes if not o.dropped]
    dropped = len(outcomes) - len(done)
    if total_tasks != len(done) + dropped + in_flight:
        raise ConservationError(
            f"generated {total_tasks} != completed {len(done)} + dropped {dropped} + in flight {in_flight}"
        )
    if len({o.task_id for o in outcomes}) != len(outcomes):
        raise ConservationError("a task has more than one outcome")
    rts = [o.response_time_ms for o in done]
    avg = sum(rts) / len(rts) if rts else 0.0
    p99 = percentile(rts, 99) if rts else 0.0
    energy = sum(o.energy_mj for o in done) / len(done) if done else 0.0
    return ExperimentReport(
        strategy_name=strategy_name,
        avg_rt_ms=avg,
        p99_rt_ms=p99,
        energy_per_task_mj=energy,
        drop_count=dropped,
        total_tasks=total_tasks,
        per_category_utilization=dict(utilization),
        timeline=timeline or [],
        completed_count=len(done),
        in_flight_count=in_flight,
        aborted=aborted,
        phases=phases or [],
        pods=pods or {},
    )


def report_json(report: ExperimentReport) -> str:
    return json.dumps(to_json(report), sort_keys=True, indent=2) + "\n"


def write_outcomes_csv(path: Path, outcomes: Iterable[TaskOutcome]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OUTCOMES_CSV_HEADER)
        for o in outcomes:
            writer.writerow(
                [
                    o.task_id,
                    o.pod_id or "",
                    f"{o.dispatch_time_ms:.3f}",
                    "" if o.response_time_ms is None else f"{o.response_time_ms:.3f}",
                    f"{o.energy_mj:.3f}",
                    int(o.dropped),
                ]
            )


def read_outcomes_csv(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "task_id": r["task_id"],
                    "pod_id": r["pod_id"] or None,
                    "dispatch_ms": float(r["dispatch_ms"]),
                    "rt_ms": float(r["rt_ms"]) if r["rt_ms"] else None,
                    "energy_mj": float(r["energy_mj"]),
                    "dropped": r["dropped"] == "1",
                }
            )
    return rows
