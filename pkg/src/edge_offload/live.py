"""Live backend: HTTP mock workers and the asynchronous dispatcher.

A worker emulates one pod. It serves ``POST /infer`` by holding one of its
emulated cores for a service time drawn like the simulator's, and
``GET /metrics`` with the CPU, power and completions since the previous poll.
The dispatcher replays the generated workload in wall-clock time with a
bounded number of requests in flight, while a poller feeds the metrics store
at 5 Hz and the MAPE-K loop runs next to both.
"""

from __future__ import annotations

import asyncio
import contextlib
import logging
import time
from dataclasses import dataclass, field
from typing import Any, AsyncIterator, Sequence

import aiohttp
import numpy as np
from aiohttp import web

from .config import ScenarioConfig
from .errors import BackendUnavailable, BindFailure, NoLivePods
from .mapek import MapeKLoop, monitor_tick, run_loop
from .metrics import MetricsSample, MetricsStore, PodAggregate
from .model import CATEGORIES, ExperimentReport, NodeCategory, NodeSpec, PodRef, ServiceProfile, Task, TaskOutcome
from .report import build_report
from .simulator import core_draw_w, draw_service_time, generate_workload, pod_power
from .strategy import ClusterState, decide

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- worker


@dataclass
class WorkerState:
    """Mutable emulation state of one worker; all access happens on its event loop."""

    spec: NodeSpec
    pod_id: str
    rng: np.random.Generator
    active: int = 0  # requests holding a core
    waiting: int = 0
    concurrent: int = 0  # requests inside /infer, waiting or not
    high_water: int = 0
    served: int = 0
    rejected: int = 0
    completed: list = field(default_factory=list)
    busy_core_s: float = 0.0
    last_change: float = field(default_factory=time.monotonic)
    last_poll: float = field(default_factory=time.monotonic)

    def _accrue(self) -> None:
        now = time.monotonic()
        self.busy_core_s += min(self.active, self.spec.cores) * (now - self.last_change)
        self.last_change = now

    def poll(self) -> dict[str, Any]:
        """CPU as busy core-time over available core-time since the last poll."""
        self._accrue()
        now = time.monotonic()
        elapsed = now - self.last_poll
        util = self.busy_core_s / (elapsed * self.spec.cores) if elapsed > 0 else self.active / self.spec.cores
        util = min(1.0, max(0.0, util))
        done, self.completed = self.completed, []
        self.busy_core_s = 0.0
        self.last_poll = now
        return {"cpu_util": util, "power_w": pod_power(self.spec, util), "completed_rts_ms": done}


def build_worker_app(state: WorkerState) -> web.Application:
    cores = asyncio.Semaphore(state.spec.cores)

    async def infer(request: web.Request) -> web.Response:
        try:
            body = await request.json()
            task_id = body["task_id"]
            if not isinstance(task_id, str) or not isinstance(body.get("tag_id", ""), str):
                raise TypeError("task_id and tag_id must be strings")
            int(body.get("replication_index", 0))
        except (ValueError, KeyError, TypeError) as exc:
            return web.json_response({"error": f"malformed task: {exc}"}, status=400)

        if cores.locked() and state.waiting >= state.spec.queue_capacity:
            state.rejected += 1
            return web.json_response({"task_id": task_id, "error": "queue full"}, status=503)
        received = time.monotonic()
        state.concurrent += 1
        state.high_water = max(state.high_water, state.concurrent)
        state.waiting += 1
        try:
            async with cores:
                state.waiting -= 1
                state._accrue()
                state.active += 1
                service_ms = draw_service_time(state.spec, state.rng)
                started = time.monotonic()
                try:
                    await asyncio.sleep(service_ms / 1000.0)
                finally:
                    state._accrue()
                    state.active -= 1
                held_ms = (time.monotonic() - started) * 1000.0
        finally:
            state.concurrent -= 1
        state.served += 1
        state.completed.append((time.monotonic() - received) * 1000.0)
        return web.json_response(
            {"task_id": task_id, "service_ms": held_ms, "energy_mj": core_draw_w(state.spec) * held_ms}
        )

    async def metrics(request: web.Request) -> web.Response:
        return web.json_response(state.poll())

    async def health(request: web.Request) -> web.Response:
        return web.json_response(
            {
                "pod_id": state.pod_id,
                "category": state.spec.category.value,
                "active": state.active,
                "high_water": state.high_water,
                "served": state.served,
                "rejected": state.rejected,
            }
        )

    app = web.Application()
    app.router.add_post("/infer", infer)
    app.router.add_get("/metrics", metrics)
    app.router.add_get("/health", health)
    return app


class Worker:
    """One emulated pod listening on ``host:port`` (port 0 picks a free one)."""

    def __init__(self, spec: NodeSpec, pod_id: str | None = None, seed: int = 0, host: str = "127.0.0.1", port: int = 0):
        self.state = WorkerState(spec, pod_id or spec.node_id, np.random.default_rng(seed))
        self.host = host
        self.port = port
        self._runner: web.AppRunner | None = None

    @property
    def address(self) -> str:
        return f"http://{self.host}:{self.port}"

    async def start(self) -> "Worker":
        self._runner = web.AppRunner(build_worker_app(self.state), access_log=None)
        await self._runner.setup()
        site = web.TCPSite(self._runner, self.host, self.port)
        try:
            await site.start()
        except OSError as exc:
            await self._runner.cleanup()
            raise BindFailure(f"cannot listen on {self.host}:{self.port}: {exc}") from exc
        sockets = site._server.sockets if site._server is not None else []  # type: ignore[union-attr]
        if sockets:
            self.port = sockets[0].getsockname()[1]
        return self

    async def stop(self) -> None:
        if self._runner is not None:
            await self._runner.cleanup()
            self._runner = None


@contextlib.asynccontextmanager
async def local_workers(specs: Sequence[NodeSpec], seed: int = 0) -> AsyncIterator[list[Worker]]:
    """Start one in-process worker per spec on free local ports."""
    workers = []
    try:
        for i, spec in enumerate(specs):
            pod_id = f"{spec.node_id}-{sum(1 for w in workers if w.state.spec.node_id == spec.node_id):02d}"
            workers.append(await Worker(spec, pod_id, seed=seed + i).start())
        yield workers
    finally:
        for w in workers:
            await w.stop()


def serve_worker(spec: NodeSpec, host: str, port: int, pod_id: str | None = None, seed: int = 0) -> None:
    """Blocking entry point for the ``worker`` subcommand."""

    async def main() -> None:
        worker = await Worker(spec, pod_id, seed, host, port).start()
        log.info("worker %s listening on %s", worker.state.pod_id, worker.address)
        try:
            await asyncio.Event().wait()
        finally:
            await worker.stop()

    with contextlib.suppress(KeyboardInterrupt):
        asyncio.run(main())


# ---------------------------------------------------------------- dispatcher side


class LiveBackend:
    """The control loop's view of a set of HTTP workers.

    Workers beyond a category's initial replica count are standby; scaling up
    activates one, scaling down returns the newest active one to standby.
    """

    def __init__(self, config: ScenarioConfig, store: MetricsStore):
        self.config = config
        self.store = store
        self.cluster = ClusterState(
            pods={c: [] for c in CATEGORIES}, weights=config.weights.weights(), normalize=config.plan.normalize
        )
        self.specs: dict[str, NodeSpec] = {}
        self.standby: dict[NodeCategory, list[PodRef]] = {c: [] for c in CATEGORIES}
        self.dead: set[str] = set()
        self.all_pods: dict[str, PodRef] = {}
        templates = {n.category: n for n in config.nodes}
        counters: dict[str, int] = {}
        for ep in config.workers:
            node = templates.get(ep.category)
            spec = node.spec() if node is not None else NodeSpec.default(ep.category)
            if ep.node_id:
                spec = NodeSpec(**{**spec.__dict__, "node_id": ep.node_id})
            idx = counters.get(spec.node_id, 0)
            counters[spec.node_id] = idx + 1
            ref = PodRef(ep.pod_id or f"{spec.node_id}-{idx:02d}", spec.node_id, ep.category, ep.address.rstrip("/"))
            self.specs[ref.pod_id] = spec
            self.all_pods[ref.pod_id] = ref
            wanted = node.replicas if node is not None else 1
            if len(self.cluster.pods[ep.category]) < wanted:
                self.cluster.pods[ep.category].append(ref)
                store.register(ref.pod_id, spec)
            else:
                self.standby[ep.category].append(ref)

    def live(self) -> list[PodRef]:
        return self.cluster.live()

    def mark_dead(self, pod_id: str) -> None:
        if pod_id in self.dead:
            return
        self.dead.add(pod_id)
        ref = self.all_pods[pod_id]
        members = self.cluster.pods[ref.category]
        members[:] = [p for p in members if p.pod_id != pod_id]
        self.store.remove(pod_id)
        self._restrict_profile()
        log.warning("pod %s unreachable, removed from rotation", pod_id)

    def unreachable_fraction(self) -> float:
        return len(self.dead) / len(self.all_pods) if self.all_pods else 1.0

    def _restrict_profile(self) -> None:
        profile = self.cluster.profile
        alive = {p.pod_id for p in self.live()}
        if profile is not None and alive and any(profile.probability(p) > 0 for p in alive):
            self.cluster.profile = profile.restricted_to(alive)

    # Backend protocol
    def monitor(self, now_ms: float) -> dict[str, PodAggregate]:
        if not self.live():
            raise BackendUnavailable("no reachable worker")
        return monitor_tick(self.store, now_ms)

    def swap_profile(self, profile: ServiceProfile) -> None:
        self.cluster.profile = profile

    def replicas(self) -> dict[NodeCategory, int]:
        return {c: len(self.cluster.pods[c]) for c in CATEGORIES}

    def scale(self, category: NodeCategory, target: int) -> None:
        members = self.cluster.pods[category]
        spare = self.standby[category]
        while len(members) < target and spare:
            ref = spare.pop(0)
            members.append(ref)
            self.store.register(ref.pod_id, self.specs[ref.pod_id])
        removed = False
        while len(members) > target:
            ref = members.pop()
            spare.insert(0, ref)
            self.store.remove(ref.pod_id)
            removed = True
        if removed:
            self._restrict_profile()


@dataclass
class LiveResult:
    report: ExperimentReport
    outcomes: list[TaskOutcome]
    store: MetricsStore
    loop: MapeKLoop
    service_ms: dict[str, float]
    health: dict[str, dict[str, Any]]
    samples_per_pod: dict[str, int]
    max_in_flight_seen: int


class Dispatcher:
    """Bounded-concurrency HTTP offloading with one re-decision on a refused connection."""

    def __init__(self, config: ScenarioConfig, backend: LiveBackend, session: aiohttp.ClientSession, rng: np.random.Generator):
        self.config = config
        self.backend = backend
        self.session = session
        self.rng = rng
        self.slots = asyncio.Semaphore(config.dispatcher.max_in_flight)
        self.timeout = aiohttp.ClientTimeout(total=config.dispatcher.timeout_ms / 1000.0)
        self.in_flight = 0
        self.high_water = 0
        self.outcomes: dict[str, TaskOutcome] = {}
        self.service_ms: dict[str, float] = {}

    def _record(self, outcome: TaskOutcome) -> None:
        if outcome.task_id in self.outcomes:
            raise AssertionError(f"second outcome for {outcome.task_id}")
        self.outcomes[outcome.task_id] = outcome

    async def dispatch(self, task: Task, t0: float) -> None:
        dispatch_ms = (time.monotonic() - t0) * 1000.0
        async with self.slots:
            self.in_flight += 1
            self.high_water = max(self.high_water, self.in_flight)
            try:
                await self._offload(task, t0, dispatch_ms)
            finally:
                self.in_flight -= 1

    async def _offload(self, task: Task, t0: float, dispatch_ms: float) -> None:
        body = {"task_id": task.task_id, "tag_id": task.tag_id, "replication_index": task.replication_index}
        for attempt in range(2):
            try:
                ref = decide(self.config.strategy, task, self.backend.cluster, self.rng)
            except NoLivePods:
                self._record(TaskOutcome.drop(task.task_id, dispatch_ms))
                return
            try:
                async with self.session.post(f"{ref.address}/infer", json=body, timeout=self.timeout) as resp:
                    payload = await resp.json()
                    status = resp.status
            except (aiohttp.ClientConnectorError, ConnectionRefusedError):
                self.backend.mark_dead(ref.pod_id)
                if attempt == 0:
                    continue
                self._record(TaskOutcome.drop(task.task_id, dispatch_ms, ref.pod_id))
                return
            except (asyncio.TimeoutError, aiohttp.ClientError) as exc:
                log.debug("task %s on %s failed: %r", task.task_id, ref.pod_id, exc)
                self._record(TaskOutcome.drop(task.task_id, dispatch_ms, ref.pod_id))
                return
            done_ms = (time.monotonic() - t0) * 1000.0
            if status != 200:
                self._record(TaskOutcome.drop(task.task_id, dispatch_ms, ref.pod_id))
                return
            self.service_ms[task.task_id] = float(payload["service_ms"])
            self._record(
                TaskOutcome(
                    task.task_id,
                    ref.pod_id,
                    dispatch_ms,
                    done_ms,
                    done_ms - dispatch_ms,
                    float(payload.get("energy_mj", 0.0)),
                    False,
                )
            )
            return


async def poll_metrics(
    backend: LiveBackend,
    session: aiohttp.ClientSession,
    period_ms: float,
    t0: float,
    stop: asyncio.Event,
    counts: dict[str, int],
) -> None:
    """Poll every live pod each period on an absolute schedule; late polls are dropped, not queued."""
    timeout = aiohttp.ClientTimeout(total=period_ms / 1000.0)

    async def one(ref: PodRef, ts: int) -> None:
        try:
            async with session.get(f"{ref.address}/metrics", timeout=timeout) as resp:
                data = await resp.json()
        except (aiohttp.ClientConnectorError, ConnectionRefusedError):
            backend.mark_dead(ref.pod_id)
            return
        except (asyncio.TimeoutError, aiohttp.ClientError) as exc:
            log.debug("poll of %s skipped: %r", ref.pod_id, exc)
            return
        if ref.pod_id not in backend.store:
            return
        window = backend.store.windows[ref.pod_id]
        if window.latest_ms is not None and ts <= window.latest_ms:
            return
        sample = MetricsSample(
            ref.pod_id, ts, float(data["cpu_util"]), float(data["power_w"]), tuple(float(x) for x in data["completed_rts_ms"])
        )
        backend.store.record(sample)
        counts[ref.pod_id] = counts.get(ref.pod_id, 0) + 1

    k = 1
    while not stop.is_set():
        target = t0 + k * period_ms / 1000.0
        delay = target - time.monotonic()
        if delay > 0:
            try:
                await asyncio.wait_for(stop.wait(), delay)
                return
            except asyncio.TimeoutError:
                pass
        ts = int(round(k * period_ms))
        await asyncio.gather(*(one(ref, ts) for ref in backend.live()))
        # skip any schedule slots that passed while this round was in progress
        elapsed_ms = (time.monotonic() - t0) * 1000.0
        k = max(k + 1, int(elapsed_ms // period_ms) + 1)


async def run_live_experiment(config: ScenarioConfig, event_sink=None, drain_s: float | None = None) -> LiveResult:
    """Drive the scenario against the configured workers in wall-clock time.

    Aborts with a partial report (``aborted=True``) once more than half of
    the pods are unreachable.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    workload_rng = np.random.default_rng(seeds[0])
    dispatch_rng = np.random.default_rng(seeds[2])
    phases = config.workload()
    duration_ms = sum(p.duration_s for p in phases) * 1000.0
    store = MetricsStore(config.metrics_horizon_ms, keep_history=True)
    backend = LiveBackend(config, store)
    loop = MapeKLoop(
        backend=backend,
        strategy=config.strategy,
        weights=config.weights.weights(),
        thresholds=config.thresholds.thresholds(),
        policy=config.scaling.policy(),
        options=config.plan.options(),
        event_sink=event_sink,
    )
    loop.iterate(0.0)
    stop = asyncio.Event()
    counts: dict[str, int] = {}
    aborted = False
    generated = 0
    tasks: list[asyncio.Task] = []
    timeline: list[dict[str, Any]] = []

    async with aiohttp.ClientSession() as session:
        dispatcher = Dispatcher(config, backend, session, dispatch_rng)
        t0 = time.monotonic()
        poller = asyncio.create_task(poll_metrics(backend, session, config.dispatcher.poll_period_ms, t0, stop, counts))

        async def control() -> None:
            async for event in run_loop(loop, config.loop_period_ms, duration_ms, stop):
                if event.ts == 0:
                    continue
                row: dict[str, Any] = {"timestamp_ms": event.ts}
                for c in CATEGORIES:
                    cpus = [a.cpu for a in loop.last_snapshot.values() if a.category == c]
                    row[f"cpu.{c.value}"] = sum(cpus) / len(cpus) if cpus else 0.0
                    row[f"replicas.{c.value}"] = len(backend.cluster.pods[c])
                timeline.append(row)

        controller = asyncio.create_task(control())
        for task in generate_workload(phases, workload_rng):
            if backend.unreachable_fraction() > 0.5:
                aborted = True
                log.error("more than half of the pods are unreachable, aborting")
                break
            delay = t0 + task.arrival_time_ms / 1000.0 - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
            generated += 1
            tasks.append(asyncio.create_task(dispatcher.dispatch(task, t0)))
        pending = [t for t in tasks if not t.done()]
        if pending:
            wait_s = drain_s if drain_s is not None else (0.5 if aborted else config.dispatcher.timeout_ms / 1000.0 + 1.0)
            await asyncio.wait(pending, timeout=wait_s)
        stop.set()
        for t in tasks:
            if not t.done():
                t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        await asyncio.gather(poller, controller, return_exceptions=True)
        health = {}
        for ref in backend.all_pods.values():
            try:
                async with session.get(f"{ref.address}/health", timeout=aiohttp.ClientTimeout(total=1.0)) as resp:
                    health[ref.pod_id] = await resp.json()
            except (asyncio.TimeoutError, aiohttp.ClientError):
                pass

    outcomes = sorted(dispatcher.outcomes.values(), key=lambda o: o.task_id)
    in_flight = generated - len(outcomes)
    utilization = {}
    for c in CATEGORIES:
        cpus = [s.cpu_util for s in store.history if backend.all_pods[s.pod_id].category == c]
        utilization[c] = sum(cpus) / len(cpus) if cpus else 0.0
    phase_rows = []
    t = 0.0
    for p in phases:
        phase_rows.append({"rf": p.rf, "start_ms": t, "end_ms": t + p.duration_s * 1000.0, "offered_rate": p.offered_rate})
        t += p.duration_s * 1000.0
    report = build_report(
        config.strategy.label,
        outcomes,
        generated,
        in_flight,
        utilization,
        timeline=timeline,
        phases=phase_rows,
        pods={pid: ref.category.value for pid, ref in sorted(backend.all_pods.items())},
        aborted=aborted,
    )
    return LiveResult(report, outcomes, store, loop, dispatcher.service_ms, health, counts, dispatcher.high_water)
