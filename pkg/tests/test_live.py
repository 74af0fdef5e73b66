import asyncio
import time

import aiohttp
import numpy as np
import pytest

from edge_offload.config import parse_config
from edge_offload.errors import BindFailure
from edge_offload.live import Dispatcher, LiveBackend, Worker, local_workers, run_live_experiment
from edge_offload.metrics import MetricsStore
from edge_offload.model import NodeCategory, NodeSpec, Task


def live_config(workers, **extra):
    data = {
        "backend": "live",
        "phases": [{"rf": 1, "duration_s": 2, "tag_count": 2}],
        "workers": [
            {"address": w.address, "category": w.state.spec.category.value, "pod_id": w.state.pod_id} for w in workers
        ],
    }
    data.update(extra)
    return parse_config(data)


def medium(**kw):
    return NodeSpec.default(NodeCategory.MEDIUM, **{"service_time_cv": 0.0, **kw})


def test_infer_holds_a_core_for_the_service_time():
    async def go():
        async with local_workers([medium()]) as (w,):
            async with aiohttp.ClientSession() as s:
                async with s.get(f"{w.address}/metrics") as r:
                    idle = await r.json()
                t = time.monotonic()
                async with s.post(f"{w.address}/infer", json={"task_id": "t1", "tag_id": "a"}) as r:
                    body = await r.json()
                elapsed = (time.monotonic() - t) * 1000.0
                async with s.get(f"{w.address}/health") as r:
                    health = await r.json()
        return idle, body, elapsed, health

    idle, body, elapsed, health = asyncio.run(go())
    assert idle["cpu_util"] == 0.0 and idle["completed_rts_ms"] == []
    assert body["task_id"] == "t1"
    assert body["service_ms"] == pytest.approx(55.0, abs=10.0)
    assert elapsed >= body["service_ms"]
    assert body["energy_mj"] == pytest.approx(20.0 / 3 * body["service_ms"])
    assert health["served"] == 1 and health["high_water"] == 1


def test_malformed_body_rejected():
    async def go():
        async with local_workers([medium()]) as (w,):
            async with aiohttp.ClientSession() as s:
                statuses = []
                for payload in ({"tag_id": "a"}, {"task_id": 5}):
                    async with s.post(f"{w.address}/infer", json=payload) as r:
                        statuses.append(r.status)
                async with s.post(f"{w.address}/infer", data=b"not json") as r:
                    statuses.append(r.status)
        return statuses

    assert asyncio.run(go()) == [400, 400, 400]


def test_full_queue_answers_503():
    async def go():
        spec = medium(cores=1, queue_capacity=1, base_service_time_ms=100.0)
        async with local_workers([spec]) as (w,):
            async with aiohttp.ClientSession() as s:

                async def one(i):
                    async with s.post(f"{w.address}/infer", json={"task_id": f"t{i}"}) as r:
                        return r.status

                return sorted(await asyncio.gather(*(one(i) for i in range(3))))

    assert asyncio.run(go()) == [200, 200, 503]


def test_cpu_reported_as_time_average():
    async def go():
        async with local_workers([medium(cores=1, base_service_time_ms=100.0)]) as (w,):
            w.state.poll()
            async with aiohttp.ClientSession() as s:
                async with s.post(f"{w.address}/infer", json={"task_id": "t"}) as r:
                    await r.read()
                await asyncio.sleep(0.1)
            return w.state.poll()

    data = asyncio.run(go())
    assert data["cpu_util"] == pytest.approx(0.5, abs=0.15)
    assert len(data["completed_rts_ms"]) == 1


def test_bind_failure():
    async def go():
        async with local_workers([medium()]) as (w,):
            with pytest.raises(BindFailure):
                await Worker(medium(), port=w.port).start()

    asyncio.run(go())


def test_redecision_after_refused_connection():
    async def go():
        async with local_workers([medium(), medium()]) as workers:
            cfg = live_config(workers, strategy="pod_level")
            backend = LiveBackend(cfg, MetricsStore())
            await workers[0].stop()
            async with aiohttp.ClientSession() as s:
                d = Dispatcher(cfg, backend, s, np.random.default_rng(0))
                t0 = time.monotonic()
                await asyncio.gather(*(d.dispatch(Task(f"t{i}", "a", 0.0), t0) for i in range(6)))
            return d, backend, workers

    d, backend, workers = asyncio.run(go())
    assert all(not o.dropped for o in d.outcomes.values())
    assert backend.dead == {workers[0].state.pod_id}
    assert {o.pod_id for o in d.outcomes.values()} == {workers[1].state.pod_id}


def test_in_flight_bound():
    async def go():
        async with local_workers([medium(cores=8, base_service_time_ms=50.0)]) as workers:
            cfg = live_config(workers, dispatcher={"max_in_flight": 3})
            backend = LiveBackend(cfg, MetricsStore())
            async with aiohttp.ClientSession() as s:
                d = Dispatcher(cfg, backend, s, np.random.default_rng(0))
                t0 = time.monotonic()
                await asyncio.gather(*(d.dispatch(Task(f"t{i}", "a", 0.0), t0) for i in range(12)))
            return d, workers[0].state.high_water

    d, worker_high_water = asyncio.run(go())
    assert d.high_water == 3 and worker_high_water <= 3
    assert len(d.outcomes) == 12


def test_aborts_when_workers_are_gone():
    async def go():
        async with local_workers([medium(), medium()]) as workers:
            cfg = live_config(workers, phases=[{"rf": 1, "duration_s": 5, "tag_count": 4}])
            for w in workers:
                await w.stop()
            t = time.monotonic()
            res = await run_live_experiment(cfg)
            return res, time.monotonic() - t

    res, wall = asyncio.run(go())
    assert res.report.aborted
    assert res.report.drop_count >= 1
    assert wall < 4.0
    r = res.report
    assert r.total_tasks == r.completed_count + r.drop_count + r.in_flight_count


def test_short_run_polls_at_five_hertz():
    async def go():
        specs = [NodeSpec.default(NodeCategory.SMALL), NodeSpec.default(NodeCategory.MEDIUM)]
        async with local_workers(specs) as workers:
            return await run_live_experiment(live_config(workers))

    res = asyncio.run(go())
    assert res.report.drop_count == 0
    assert all(8 <= n <= 11 for n in res.samples_per_pod.values())
    for o in res.outcomes:
        assert o.response_time_ms >= res.service_ms[o.task_id]
