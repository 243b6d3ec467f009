import csv
import itertools

import pytest

from holfree.bench import ExperimentConfig, run_experiment
from holfree.core import ContractError
from holfree.queues import BoundedQueue
from holfree.runtime import VirtualRuntime
from holfree.scheduler import (SchedulerConfig, SchedulerObservation, TraceRow, compute_delta, round_half_away,
                               scheduler_loop, update_workers, write_trace_csv)


def cfg(**kw):
    base = dict(alpha=2.0, beta=2.0, theta_c=0.7, q_max=100, delta_clip=2, initial_workers=12, max_workers=16)
    base.update(kw)
    return SchedulerConfig(**base)


def delta(q, c, **kw):
    return compute_delta(SchedulerObservation(q, c), cfg(**kw))


def test_worked_example():
    assert delta(10, 0.9) == 2
    assert update_workers(12, 2, cfg()) == 14


def test_balanced_point_gives_zero():
    assert delta(100, 0.7) == 0


def test_full_queue_idle_pool():
    # 2*(0) + 2*(0 - 0.7) = -1.4
    assert delta(100, 0.0) == -1


@pytest.mark.parametrize("current,d,expected", [(12, 2, 14), (1, -2, 1), (15, 2, 16)])
def test_update_workers_clamps(current, d, expected):
    assert update_workers(current, d, cfg()) == expected


def test_update_workers_precondition():
    with pytest.raises(ContractError):
        update_workers(0, 1, cfg())
    with pytest.raises(ContractError):
        update_workers(17, 1, cfg())


def test_round_half_away_from_zero():
    assert [round_half_away(x) for x in (0.5, 1.5, -0.5, -1.5, 0.49, -2.2)] == [1, 2, -1, -2, 0, -2]


def test_observation_bounds():
    with pytest.raises(ContractError):
        delta(101, 0.5)
    with pytest.raises(ContractError):
        delta(5, 1.1)


@pytest.mark.parametrize("kw", [dict(alpha=-1), dict(theta_c=1.0), dict(delta_clip=0), dict(initial_workers=20),
                                dict(tick=0), dict(ema_alpha=0)])
def test_config_validation(kw):
    with pytest.raises(ContractError):
        cfg(**kw)


def test_monotone_grid():
    config = cfg()
    grid = [k / 20 for k in range(21)]
    table = {(qi, ci): compute_delta(SchedulerObservation(100 * q, c), config)
             for qi, q in enumerate(grid) for ci, c in enumerate(grid)}
    for qi, ci in itertools.product(range(21), range(21)):
        d = table[qi, ci]
        assert -2 <= d <= 2
        if ci < 20:
            assert table[qi, ci + 1] >= d
        if qi < 20:
            assert table[qi + 1, ci] <= d


class FakePool:
    def __init__(self, size, util):
        self.size = size
        self.util = util
        self.resizes = []

    def utilization(self):
        return self.util

    def resize(self, n):
        self.resizes.append(n)
        self.size = n


def _loop(pool, queues, config, ticks):
    rt = VirtualRuntime()
    trace = []
    rt.spawn(scheduler_loop(pool, queues, config, rt.clock, lambda: rt.clock.now() > ticks * config.tick, trace))
    rt.run()
    return trace


def test_stalled_consumer_with_idle_workers_shrinks_within_a_tick():
    q = BoundedQueue(100, "batch")
    for i in range(100):
        q.put(i)
    trace = _loop(FakePool(12, 0.1), [q], cfg(), 1)
    assert trace[0].delta <= 0 and trace[0].workers <= 12


def test_empty_queues_saturated_pool_grows_by_clip():
    pool = FakePool(12, 1.0)
    trace = _loop(pool, [BoundedQueue(100, "batch")], cfg(max_workers=64), 5)
    assert [r.delta for r in trace] == [2] * 5
    assert [r.workers for r in trace] == [14, 16, 18, 20, 22]
    assert [r.time_ms for r in trace] == [500, 1000, 1500, 2000, 2500]


def test_worker_count_stays_in_bounds():
    pool = FakePool(2, 0.0)
    q = BoundedQueue(100, "batch")
    for i in range(100):
        q.put(i)
    trace = _loop(pool, [q], cfg(max_workers=4, initial_workers=2), 10)
    assert all(1 <= r.workers <= 4 for r in trace)
    assert trace[-1].workers == 1


def test_trace_csv(tmp_path):
    path = tmp_path / "trace.csv"
    write_trace_csv(path, [TraceRow(500, 14, 0.0, 1.0, 2)])
    assert list(csv.reader(open(path))) == [["time_ms", "workers", "q_avg", "c_usage", "delta"],
                                            ["500", "14", "0.0", "1.0", "2"]]


@pytest.mark.parametrize("shared", [False, True])
def test_closed_loop_settles_once_queue_saturates(shared):
    config = ExperimentConfig(workload="speech_3s", seed=7, n_samples=10_000)
    config.loader_opts.shared_queues = shared
    config.scheduler.max_workers = 256
    report = run_experiment(config)
    trace = report["scheduler_trace"]
    saturated = next(k for k, r in enumerate(trace) if r["q_avg"] >= 90)
    tail = trace[saturated:]
    assert len(tail) >= 5
    assert all(abs(r["delta"]) <= 1 for r in tail)
    assert all(1 <= r["workers"] <= 256 for r in trace)
    if shared:
        # a full shared fast queue blocks workers, so the loop also pulls back
        assert any(r["delta"] < 0 for r in tail)
    assert report["conservation"]["exactly_once"]
