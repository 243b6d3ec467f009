"""Experiment harness: config parsing, loader wiring, metrics and comparison.

Config files are INI with these sections (every key is optional)::

    [experiment]   loader, mode, seed, n_consumers, batch_size, out, time_scale,
                   max_wall_s, window_ms
    [workload]     name, n_samples, and any TargetStats/WorkloadSpec override
    [consumer]     compute_ms, transfer_ms, poll_ms, prefetch, horizon_ms, max_batches
    [loader]       workers, prefetch_factor, queue_capacity, shared_queues,
                   batcher_sleep_ms, timeout_ms, size_cutoff
    [scheduler]    enabled, alpha, beta, theta_c, delta_clip, max_workers, tick_ms, ema_alpha
    [profiler]     adaptive, window, warmup_ms, interval_ms

Unset per-workload keys (batch size, consumer compute, sample count) fall
back to :data:`WORKLOAD_DEFAULTS`.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Callable, Optional, Sequence

from .baselines import SyncLoader, autoorder, shard
from .core import Sample, Sleep
from .pipeline import BalancedConfig, BalancedLoader
from .profiler import percentile
from .queues import BoundedQueue
from .runtime import make_runtime
from .scheduler import SchedulerConfig
from .trainer_sim import ConsumerConfig, run_consumer
from .workloads import MB, SPECS, generate, get_spec, output_size

log = logging.getLogger(__name__)

LOADERS = ("minato", "sync", "autoorder", "sizeheuristic")
MODES = ("virtual", "realtime")

# batch size, consumer compute per batch (ms) and stream length per workload;
# compute is small enough that preprocessing is the bottleneck under sync
WORKLOAD_DEFAULTS = {
    "speech_3s": dict(batch_size=24, compute_ms=200, n_samples=1000),
    "speech_10s": dict(batch_size=24, compute_ms=200, n_samples=1000),
    "img_seg": dict(batch_size=3, compute_ms=10, n_samples=4000),
    "obj_det": dict(batch_size=48, compute_ms=60, n_samples=4800),
}

# simulated core count; os.cpu_count() would tie results to the host
SIM_MAX_WORKERS = 128


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ConsumerSection:
    compute_ms: Optional[int] = None
    transfer_ms: int = 0
    poll_ms: int = 10
    prefetch: bool = True
    horizon_ms: Optional[int] = None
    max_batches: Optional[int] = None


@dataclass
class LoaderSection:
    workers: int = 12
    prefetch_factor: int = 2
    queue_capacity: int = 100
    shared_queues: bool = False
    batcher_sleep_ms: int = 10
    timeout_ms: Optional[float] = None
    size_cutoff: Optional[int] = None


@dataclass
class SchedulerSection:
    enabled: bool = True
    alpha: float = 2.0
    beta: float = 2.0
    theta_c: float = 0.7
    delta_clip: int = 2
    max_workers: int = SIM_MAX_WORKERS
    tick_ms: int = 500
    ema_alpha: float = 0.3


@dataclass
class ProfilerSection:
    adaptive: bool = True
    window: int = 1024
    warmup_ms: int = 10_000
    interval_ms: int = 1000


@dataclass
class ExperimentConfig:
    workload: str = "speech_3s"
    loader: str = "minato"
    mode: str = "virtual"
    seed: int = 0
    n_consumers: int = 1
    batch_size: Optional[int] = None
    n_samples: Optional[int] = None
    workload_overrides: dict = field(default_factory=dict)
    consumer: ConsumerSection = field(default_factory=ConsumerSection)
    loader_opts: LoaderSection = field(default_factory=LoaderSection)
    scheduler: SchedulerSection = field(default_factory=SchedulerSection)
    profiler: ProfilerSection = field(default_factory=ProfilerSection)
    out: Optional[str] = None
    time_scale: float = 1.0
    max_wall_s: Optional[float] = None
    window_ms: int = 100

    def __post_init__(self) -> None:
        self.validate()

    def _default(self, key: str):
        return WORKLOAD_DEFAULTS.get(self.workload, {}).get(key)

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size if self.batch_size is not None else self._default("batch_size") or 1

    @property
    def effective_n_samples(self) -> int:
        return self.n_samples if self.n_samples is not None else self._default("n_samples") or 1000

    @property
    def compute_ms(self) -> int:
        c = self.consumer.compute_ms
        return c if c is not None else self._default("compute_ms") or 0

    def validate(self) -> None:
        if self.workload not in SPECS:
            raise ConfigError(f"workload.name: unknown workload {self.workload!r}; choose from {sorted(SPECS)}")
        if self.loader not in LOADERS:
            raise ConfigError(f"experiment.loader: {self.loader!r} not in {LOADERS}")
        if self.mode not in MODES:
            raise ConfigError(f"experiment.mode: {self.mode!r} not in {MODES}")
        if self.n_consumers < 1:
            raise ConfigError(f"experiment.n_consumers: must be >= 1, got {self.n_consumers}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"experiment.batch_size: must be >= 1, got {self.batch_size}")
        if self.n_samples is not None and self.n_samples < 1:
            raise ConfigError(f"workload.n_samples: must be >= 1, got {self.n_samples}")
        if self.window_ms < 1:
            raise ConfigError("experiment.window_ms: must be >= 1")
        if not self.time_scale > 0:
            raise ConfigError("experiment.time_scale: must be positive")
        lo = self.loader_opts
        if lo.workers < 1:
            raise ConfigError(f"loader.workers: must be >= 1, got {lo.workers}")
        if lo.prefetch_factor < 1:
            raise ConfigError(f"loader.prefetch_factor: must be >= 1, got {lo.prefetch_factor}")
        if lo.queue_capacity < 1:
            raise ConfigError(f"loader.queue_capacity: must be >= 1, got {lo.queue_capacity}")
        # sub-configs validate themselves; re-raise with the section name
        for section, build in (("workload", self.workload_spec), ("consumer", self.consumer_config),
                               ("scheduler", self.scheduler_config)):
            try:
                build()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from exc

    def workload_spec(self):
        return get_spec(self.workload, **dict(self.workload_overrides))

    def consumer_config(self) -> ConsumerConfig:
        c = self.consumer
        return ConsumerConfig(self.compute_ms, c.transfer_ms, c.poll_ms, c.prefetch, c.horizon_ms, c.max_batches)

    def scheduler_config(self) -> Optional[SchedulerConfig]:
        s = self.scheduler
        if not s.enabled:
            return None
        initial = self.loader_opts.workers * self.n_consumers
        return SchedulerConfig(s.alpha, s.beta, s.theta_c, self.loader_opts.queue_capacity, s.delta_clip,
                               min(initial, s.max_workers), s.max_workers, s.tick_ms, s.ema_alpha)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_size"] = self.effective_batch_size
        d["n_samples"] = self.effective_n_samples
        d["consumer"]["compute_ms"] = self.compute_ms
        d.pop("out")
        return d


# ----------------------------------------------------------------- parsing

_SECTIONS = {
    "consumer": ("consumer", ConsumerSection),
    "loader": ("loader_opts", LoaderSection),
    "scheduler": ("scheduler", SchedulerSection),
    "profiler": ("profiler", ProfilerSection),
}
_EXPERIMENT_KEYS = {"loader": str, "mode": str, "seed": int, "n_consumers": int, "batch_size": int,
                    "out": str, "time_scale": float, "max_wall_s": float, "window_ms": int}
_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _coerce(where: str, raw: str, kind):
    raw = raw.strip()
    if raw.lower() in ("", "none", "null"):
        return None
    try:
        if kind is bool:
            return _BOOL[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw


def _section_kinds(cls) -> dict:
    kinds = {}
    for f in fields(cls):
        ann = str(f.type)
        if "bool" in ann:
            kinds[f.name] = bool
        elif "int" in ann:
            kinds[f.name] = int
        elif "float" in ann:
            kinds[f.name] = float
        else:
            kinds[f.name] = str
    return kinds


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    kwargs: dict = {}
    known = {"experiment", "workload", *_SECTIONS}
    for name in cp.sections():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]; expected one of {sorted(known)}")
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"experiment.{key}: unknown key")
            kwargs[key] = _coerce(f"experiment.{key}", raw, _EXPERIMENT_KEYS[key])
    if cp.has_section("workload"):
        overrides = {}
        spec_fields = _workload_override_kinds()
        for key, raw in cp.items("workload"):
            if key == "name":
                kwargs["workload"] = raw.strip()
            elif key == "n_samples":
                kwargs["n_samples"] = _coerce("workload.n_samples", raw, int)
            elif key in spec_fields:
                overrides[key] = _coerce(f"workload.{key}", raw, spec_fields[key])
            else:
                raise ConfigError(f"workload.{key}: unknown key")
        kwargs["workload_overrides"] = overrides
    for section, (attr, cls) in _SECTIONS.items():
        if not cp.has_section(section):
            continue
        kinds = _section_kinds(cls)
        values = {}
        for key, raw in cp.items(section):
            if key not in kinds:
                raise ConfigError(f"{section}.{key}: unknown key")
            values[key] = _coerce(f"{section}.{key}", raw, kinds[key])
        try:
            kwargs[attr] = cls(**{k: v for k, v in values.items() if v is not None or _nullable(cls, k)})
        except TypeError as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    return ExperimentConfig(**kwargs)


def _nullable(cls, name: str) -> bool:
    return any(f.name == name and "Optional" in str(f.type) for f in fields(cls))


def _workload_override_kinds() -> dict:
    kinds = {"seed": int, "heavy_ms": int, "heavy_every": int, "size_cost_rho": float}
    kinds.update({k: float for k in ("avg", "median", "p75", "p90")})
    kinds.update({k: int for k in ("min", "max")})
    return kinds


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


# --------------------------------------------------------------- execution


@dataclass
class _Run:
    consumers: list
    batch_queues: list
    batches: list
    extra: Callable[[], dict]
    worker_count: Optional[Callable[[], int]] = None
    watched: list = field(default_factory=list)
    loader: Optional[BalancedLoader] = None
    sync_loaders: list = field(default_factory=list)


def _size_cutoff(cfg: ExperimentConfig, samples: Sequence[Sample]) -> int:
    if cfg.loader_opts.size_cutoff is not None:
        return cfg.loader_opts.size_cutoff
    # offline p75 of input sizes: the top quarter is guessed slow
    return percentile([s.size_bytes for s in samples], 75)


def _wire_balanced(cfg: ExperimentConfig, rt, samples: list) -> _Run:
    size = cfg.loader == "sizeheuristic"
    lo, pr = cfg.loader_opts, cfg.profiler
    mcfg = BalancedConfig(
        batch_size=cfg.effective_batch_size, n_consumers=cfg.n_consumers, queue_capacity=lo.queue_capacity,
        batcher_sleep=lo.batcher_sleep_ms, shared_queues=lo.shared_queues, timeout_ms=lo.timeout_ms,
        adaptive_timeout=pr.adaptive, profile_window=pr.window, warmup_ms=pr.warmup_ms,
        profile_interval=pr.interval_ms, classifier="size" if size else "timeout",
        size_cutoff=_size_cutoff(cfg, samples) if size else None,
        workers=lo.workers * cfg.n_consumers, scheduler=cfg.scheduler_config(),
    )
    loader = BalancedLoader(rt, samples, mcfg, cfg.consumer_config(), seed=cfg.seed).start()
    pool = loader.pool

    def extra() -> dict:
        return {
            "fast_count": pool.fast_count,
            "temp_insertions": pool.temp_insertions,
            "slow_completed": pool.slow_completed,
            "workers_spawned": len(pool.workers),
            "final_timeout_ms": _num(loader.policy.t_out),
            "timeout_source": loader.policy.source,
            "timeout_updates": len(loader.profiler.updates),
            "size_cutoff": mcfg.size_cutoff,
        }

    return _Run(loader.consumers, loader.batch_queues, loader.batches, extra, lambda: pool.size, loader=loader,
                watched=[("fast", lambda: sum(len(q) for q in pool.fast_queues)),
                         ("temp", lambda: sum(len(w.temp) for w in pool.workers)),
                         ("slow", lambda: sum(len(q) for q in pool.slow_queues))])


def _wire_sync(cfg: ExperimentConfig, rt, samples: list) -> _Run:
    if cfg.loader == "autoorder":
        for s in samples:
            s.chain = autoorder(s.chain)
    lo = cfg.loader_opts
    consumers, queues, batches, loaders = [], [], [], []
    for rank in range(cfg.n_consumers):
        bq = BoundedQueue(lo.queue_capacity, role="batch", name=f"gpu{rank}.batch")
        sl = SyncLoader(rt, shard(samples, rank, cfg.n_consumers), cfg.effective_batch_size, lo.workers,
                        lo.prefetch_factor, bq, random.Random(cfg.seed + rank), name=f"sync{rank}").start()
        consumers.append(run_consumer(cfg.consumer_config(), bq, rt, f"gpu{rank}"))
        queues.append(bq)
        batches.append(sl.batches)
        loaders.append(sl)
    extra = lambda: {"workers_total": lo.workers * cfg.n_consumers, "prefetch_factor": lo.prefetch_factor}
    return _Run(consumers, queues, batches, extra, sync_loaders=loaders)


def _monitor(run: _Run, clock, window_ms: int, series: list):
    """Sample queue occupancy and pool size every window until consumers finish."""
    while True:
        row = {"t_ms": clock.now(), "batch": sum(len(q) for q in run.batch_queues)}
        for name, fn in run.watched:
            row[name] = fn()
        if run.worker_count is not None:
            row["workers"] = run.worker_count()
        series.append(row)
        if all(c.finished for c in run.consumers):
            return
        yield Sleep(window_ms)


def run_experiment(config: ExperimentConfig, out_dir=None) -> dict:
    """Run one experiment and return its metrics report (also written to disk)."""
    config.validate()
    spec = config.workload_spec()
    samples = generate(spec, config.effective_n_samples, config.seed)
    generated = {s.id: output_size(s) for s in samples}
    rt = make_runtime(config.mode, config.time_scale)
    if config.loader in ("minato", "sizeheuristic"):
        run = _wire_balanced(config, rt, samples)
    else:
        run = _wire_sync(config, rt, samples)
    occupancy: list = []
    rt.spawn(_monitor(run, rt.clock, config.window_ms, occupancy), "monitor")
    partial = False
    if config.mode == "virtual":
        rt.run()
        stuck = [p.name for p in rt.blocked()]
        if stuck:
            raise RuntimeError(f"experiment deadlocked; blocked processes: {stuck[:8]}")
    else:
        ok = rt.run(timeout=config.max_wall_s)
        if not ok:
            log.error("realtime run exceeded %.1f s; aborting with partial metrics", config.max_wall_s)
            partial = True
            _abort(run)
            rt.run(timeout=5.0)
    report = build_report(config, run, generated, occupancy, partial)
    if config.mode == "virtual":
        report["events"] = rt.events
    out = out_dir if out_dir is not None else config.out
    if out is not None:
        write_report(report, out)
    return report


def _abort(run: _Run) -> None:
    if run.loader is not None:
        run.loader.abort()
    for q in run.batch_queues:
        q.close()
    for sl in run.sync_loaders:
        sl._permits.close()
        sl._done.close()
        sl._sealed.close()


# ----------------------------------------------------------------- metrics


def _num(x):
    if isinstance(x, Fraction):
        x = float(x)
    if isinstance(x, float):
        if math.isinf(x):
            return None
        return round(x, 6)
    return x


def _dist(values: Sequence) -> dict:
    if not values:
        return {"n": 0}
    return {
        "n": len(values),
        "mean": _num(sum(values) / len(values)),
        "p50": percentile(values, 50),
        "p90": percentile(values, 90),
        "p99": percentile(values, 99),
        "max": max(values),
    }


def build_report(config: ExperimentConfig, run: _Run, generated: dict, occupancy: list, partial: bool) -> dict:
    stats = run.consumers
    start = min(c.start for c in stats)
    completion = max(c.end for c in stats) - start
    window = config.window_ms
    n_windows = max(1, -(-completion // window))
    bytes_per_window = [0.0] * n_windows
    busy_per_window = [0] * n_windows
    latencies = []
    for c in stats:
        for r in c.records:
            idx = min(n_windows - 1, max(0, (r.compute_end - start - 1) // window))
            bytes_per_window[idx] += r.nbytes
            latencies.append(r.compute_start - r.sealed_at)
            # busy time overlapping each window
            t = r.compute_start - start
            end = r.compute_end - start
            while t < end:
                w = t // window
                step = min(end, (w + 1) * window) - t
                busy_per_window[min(w, n_windows - 1)] += step
                t += step
    total_bytes = sum(c.nbytes for c in stats)
    consumed = [i for c in stats for i in c.sample_ids]
    consumed_bytes = sum((generated[i] for i in consumed if i in generated), Fraction(0))
    generated_bytes = sum(generated.values(), Fraction(0))
    batch_sizes = [len(b) for per in run.batches for b in per]
    B = config.effective_batch_size
    partial_batches = [n for n in batch_sizes if n != B]
    dup = len(consumed) - len(set(consumed))
    missing = len(set(generated) - set(consumed))
    conservation = {
        "generated": len(generated),
        "consumed": len(consumed),
        "duplicates": dup,
        "missing": missing,
        "generated_mb": _num(generated_bytes / MB),
        "consumed_mb": _num(consumed_bytes / MB),
        "bytes_equal": consumed_bytes == generated_bytes,
        "partial_batches": partial_batches,
        "exactly_once": dup == 0 and missing == 0,
        "batch_sizes_ok": len(partial_batches) <= config.n_consumers
        and all(0 < n < B for n in partial_batches),
    }
    extra = run.extra()
    n = len(generated)
    slow = extra.get("temp_insertions")
    consumers = []
    for c in stats:
        assert c.busy_ms + c.idle_ms == c.span
        consumers.append({
            "name": c.name,
            "span_ms": c.span,
            "busy_ms": c.busy_ms,
            "idle_ms": c.idle_ms,
            "busy_fraction": _num(c.busy_fraction),
            "idle_fraction": _num(c.idle_fraction),
            "batches": len(c.records),
            "samples": len(c.sample_ids),
            "mb": _num(c.nbytes / MB),
            "poll_sleeps": c.poll_sleeps,
        })
    mean = lambda xs: _num(sum(xs) / len(xs)) if xs else None
    report = {
        "workload": config.workload,
        "loader": config.loader,
        "mode": config.mode,
        "seed": config.seed,
        "n_samples": n,
        "n_consumers": config.n_consumers,
        "batch_size": B,
        "partial": partial,
        "completion_ms": completion,
        "busy_fraction": mean([c.busy_fraction for c in stats]),
        "idle_fraction": mean([c.idle_fraction for c in stats]),
        "throughput_mb_s": _num(total_bytes / MB / (completion / 1000)) if completion else 0.0,
        "slow_rate": _num(slow / n) if slow is not None and n else None,
        "consumers": consumers,
        "batch_latency_ms": _dist(latencies),
        "series": {
            "window_ms": window,
            "throughput_mb_s": [_num(b / MB / (window / 1000)) for b in bytes_per_window],
            "busy_fraction": [_num(b / (window * len(stats))) for b in busy_per_window],
        },
        "queue_occupancy": occupancy,
        "scheduler_trace": [asdict(r) for r in run.loader.scheduler_trace] if run.loader else [],
        "loader_stats": extra,
        "conservation": conservation,
        "config": config.to_dict(),
    }
    return report


def dumps(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def write_report(report: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.json"
    path.write_text(dumps(report))
    series = report["series"]
    with open(out / "throughput.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_ms", "throughput_mb_s", "busy_fraction"])
        for k, (mb, busy) in enumerate(zip(series["throughput_mb_s"], series["busy_fraction"])):
            w.writerow([(k + 1) * series["window_ms"], mb, busy])
    occ = report["queue_occupancy"]
    if occ:
        cols = list(occ[0])
        with open(out / "queues.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, cols)
            w.writeheader()
            w.writerows(occ)
    if report["scheduler_trace"]:
        with open(out / "scheduler.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, list(report["scheduler_trace"][0]))
            w.writeheader()
            w.writerows(report["scheduler_trace"])
    return path


def load_report(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    return json.loads(p.read_text())


# ----------------------------------------------------------------- compare


def compare(reports: Sequence[dict]) -> list:
    """Rows sorted by completion time; speedup relative to the slowest run."""
    if len(reports) < 2:
        raise ValueError("compare needs at least two reports")
    keys = ("workload", "seed", "n_samples")
    first = reports[0]
    for r in reports[1:]:
        for k in keys:
            if r.get(k) != first.get(k):
                raise ValueError(f"reports disagree on {k}: {first.get(k)!r} vs {r.get(k)!r}")
    ref = max(reports, key=lambda r: r["completion_ms"])
    rows = []
    for r in reports:
        rows.append({
            "loader": r["loader"],
            "n_consumers": r["n_consumers"],
            "completion_ms": r["completion_ms"],
            "speedup": _num(ref["completion_ms"] / r["completion_ms"]) if r["completion_ms"] else None,
            "idle_fraction": r["idle_fraction"],
            "idle_delta": _num(r["idle_fraction"] - ref["idle_fraction"]),
            "throughput_mb_s": r["throughput_mb_s"],
        })
    rows.sort(key=lambda row: row["completion_ms"])
    return rows


def format_table(rows: Sequence[dict]) -> str:
    cols = list(rows[0])
    cells = [[str(row[c]) for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    return "\n".join([line(cols), line(["-" * w for w in widths])] + [line(r) for r in cells])


def write_compare_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
