"""Discrete-event co-scheduling simulator, metrics, and capacity planning."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .costmodel import CostModelParams, estimate_plan_time
from .kvcache import EvictionPolicy, KVCache
from .predictor import (
    InsufficientHistory,
    MemoryPredictor,
    PredictorConfig,
    threshold_from_forecast,
)
from .scheduler import BatchPlan, Scheduler, SchedulerConfig, SloConfig
from .workload import Request, RequestKind, TraceEvent, make_requests


class EngineConfigError(ValueError):
    pass


class ExhaustedLadder(RuntimeError):
    def __init__(self, message: str, best: Optional["CapacityRung"] = None):
        super().__init__(message)
        self.best = best


# reference_aware: the scheduler sees which evicted blocks pending offline
# work still references; that bookkeeping comes with the task-aware manager
RUNGS = {
    "BS": dict(policy="fcfs", slo_aware=False, eviction="lru", use_threshold=False, reference_aware=False),
    "BS+E": dict(policy="fcfs", slo_aware=True, eviction="lru", use_threshold=False, reference_aware=False),
    "BS+E+S": dict(policy="kv_aware", slo_aware=True, eviction="lru", use_threshold=False, reference_aware=False),
    "FULL": dict(policy="kv_aware", slo_aware=True, eviction="task_aware", use_threshold=True, reference_aware=True),
}


@dataclass
class EngineConfig:
    capacity_tokens: int = 131072
    block_size: int = 16
    slo: SloConfig = field(default_factory=SloConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    eviction: str = "task_aware"
    use_threshold: bool = True
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    params_true: CostModelParams = field(default_factory=CostModelParams)
    params_est: Optional[CostModelParams] = None  # None: the estimator is exact
    noise_std: float = 0.0
    seed: int = 0
    max_iterations: int = 5_000_000

    def validate(self) -> None:
        if self.capacity_tokens < self.block_size or self.block_size < 1:
            raise EngineConfigError("capacity_tokens must hold at least one block")
        if self.noise_std < 0:
            raise EngineConfigError("noise_std must be non-negative")
        try:
            EvictionPolicy(self.eviction)
            self.scheduler.validate()
            self.predictor.validate()
        except ValueError as exc:
            raise EngineConfigError(str(exc)) from None

    @property
    def estimator(self) -> CostModelParams:
        return self.params_est if self.params_est is not None else self.params_true

    def with_rung(self, rung: str) -> "EngineConfig":
        try:
            flags = RUNGS[rung]
        except KeyError:
            raise EngineConfigError(f"unknown rung {rung!r}; choose from {list(RUNGS)}") from None
        sched = replace(
            self.scheduler,
            policy=flags["policy"],
            slo_aware=flags["slo_aware"],
            reference_aware=flags["reference_aware"],
        )
        return replace(
            self,
            scheduler=sched,
            eviction=flags["eviction"],
            use_threshold=flags["use_threshold"],
        )


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class RequestRecord:
    id: int
    kind: str
    arrival_s: float
    ttft_s: Optional[float]
    mean_tpot_s: Optional[float]
    slo_met: Optional[bool]
    finish_s: Optional[float]
    prompt_len: int
    output_len: int
    hit_tokens: int
    cold_tokens: int
    recompute_tokens: int


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    clock_s: float
    time_s: float
    benefit: int
    punishment: int
    occupied: int
    online_free: int
    offline_free: int
    active_online: int
    active_offline: int
    est_time_s: float
    budget_s: float
    slo_budget_s: float
    slo_risk: bool
    threshold: int


ITERATION_FIELDS = [
    "iteration",
    "clock_s",
    "time_s",
    "benefit",
    "punishment",
    "occupied",
    "online_free",
    "offline_free",
    "active_online",
    "active_offline",
]


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return repr(round(x, 12))
    return str(x)


def _json_float(x):
    if x is None:
        return None
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return round(float(x), 12)


@dataclass
class Metrics:
    requests: list
    iterations: list
    offline_admissions: list  # (clock_s, hit_tokens, prompt_len) per first prefill start
    sim_time_s: float
    offline_makespan_s: float
    offline_tokens: int

    @property
    def throughput_tok_s(self) -> float:
        if self.offline_makespan_s <= 0:
            return 0.0
        return self.offline_tokens / self.offline_makespan_s

    def hit_ratio(self, start: float = -math.inf, end: float = math.inf) -> float:
        hit = total = 0
        for t, h, n in self.offline_admissions:
            if start <= t < end:
                hit += min(h, n)
                total += n
        return hit / total if total else 0.0

    def online_records(self) -> list:
        return [r for r in self.requests if r.kind == "online"]

    @property
    def attainment(self) -> float:
        recs = self.online_records()
        if not recs:
            return 1.0
        return sum(1 for r in recs if r.slo_met) / len(recs)

    @property
    def objective_value(self) -> float:
        """Net tokens (benefit minus punishment) per second over the whole run."""
        t = sum(it.time_s for it in self.iterations)
        if t <= 0:
            return 0.0
        return sum(it.benefit - it.punishment for it in self.iterations) / t

    def summary(self) -> dict:
        return {
            "throughput_tok_s": _json_float(self.throughput_tok_s),
            "hit_ratio": _json_float(self.hit_ratio()),
            "attainment": _json_float(self.attainment),
            "eq3_value": _json_float(self.objective_value),  # key fixed by the output format
            "offline_tokens": self.offline_tokens,
            "offline_makespan_s": _json_float(self.offline_makespan_s),
            "sim_time_s": _json_float(self.sim_time_s),
            "iterations": len(self.iterations),
            "online_requests": len(self.online_records()),
            "offline_requests": len(self.requests) - len(self.online_records()),
        }

    # ---------------------------------------------------------- writers

    def iterations_csv(self, extended: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ITERATION_FIELDS + (
            ["est_time_s", "budget_s", "slo_budget_s", "slo_risk", "threshold"] if extended else []
        )
        w.writerow(cols)
        for it in self.iterations:
            d = asdict(it)
            w.writerow([_fmt(d[c]) for c in cols])
        return buf.getvalue()

    def requests_jsonl(self) -> str:
        lines = []
        for r in self.requests:
            rec = {
                "id": r.id,
                "kind": r.kind,
                "ttft_s": _json_float(r.ttft_s),
                "mean_tpot_s": _json_float(r.mean_tpot_s),
                "slo_met": r.slo_met,
                "arrival_s": _json_float(r.arrival_s),
                "finish_s": _json_float(r.finish_s),
                "prompt_len": r.prompt_len,
                "output_len": r.output_len,
                "hit_tokens": r.hit_tokens,
                "recompute_tokens": r.recompute_tokens,
            }
            lines.append(json.dumps(rec, sort_keys=True))
        return "".join(line + "\n" for line in lines)

    def summary_json(self, extra: Optional[dict] = None) -> str:
        d = self.summary()
        if extra:
            d.update(extra)
        return json.dumps(d, sort_keys=True, indent=2) + "\n"


def _record(r: Request, slo: SloConfig) -> RequestRecord:
    met = None
    if r.is_online:
        ttft = r.ttft
        tpot = r.mean_tpot
        met = bool(ttft is not None and ttft <= slo.ttft + 1e-12 and (tpot or 0.0) <= slo.tpot + 1e-12)
    return RequestRecord(
        id=r.id,
        kind=r.kind.value,
        arrival_s=r.arrival_time,
        ttft_s=r.ttft,
        mean_tpot_s=r.mean_tpot,
        slo_met=met,
        finish_s=r.finish_time,
        prompt_len=r.prompt_len,
        output_len=r.decode_done,
        hit_tokens=r.hit_tokens,
        cold_tokens=r.cold_tokens,
        recompute_tokens=r.recompute_tokens,
    )


# --------------------------------------------------------------------------
# engine


class Engine:
    """One simulated accelerator; ``run`` drives it to completion."""

    def __init__(self, config: EngineConfig):
        config.validate()
        self.config = config
        self.cache = KVCache(config.capacity_tokens, config.block_size, EvictionPolicy(config.eviction))
        self.scheduler = Scheduler(self.cache, config.estimator, config.slo, config.scheduler)
        self.predictor = MemoryPredictor.from_config(config.predictor)
        self.rng = np.random.default_rng(config.seed)
        self.clock = 0.0
        self.iterations = []
        self.plans_hook = None  # optional callable(plan, true_time) for inspection
        self._last_obs = -math.inf
        self._first_admission = {}

    def _update_threshold(self) -> None:
        cfg = self.config
        cap = self.cache.capacity_tokens
        if not cfg.use_threshold:
            self.cache.set_threshold(cap)
            return
        if self.clock - self._last_obs >= cfg.predictor.min_interval_s:
            self.predictor.observe(self.clock, self.cache.online_pinned_tokens())
            self._last_obs = self.clock
        try:
            thr = threshold_from_forecast(self.predictor.forecast(self.clock), cap)
        except InsufficientHistory:
            thr = max(cap - cfg.predictor.default_reserve_tokens, 0)
        self.cache.set_threshold(thr)

    def run(self, online: Sequence[TraceEvent], offline: Sequence[TraceEvent]) -> Metrics:
        cfg = self.config
        online_reqs = make_requests(online, first_id=0)
        offline_reqs = make_requests(offline, first_id=len(online_reqs))
        for r in online_reqs + offline_reqs:
            if r.prompt_len + r.target_output_len > self.cache.capacity_tokens:
                raise EngineConfigError(
                    f"request {r.id} needs {r.prompt_len + r.target_output_len} tokens, "
                    f"capacity is {self.cache.capacity_tokens}"
                )
        arrivals = sorted(online_reqs + offline_reqs, key=lambda r: (r.arrival_time, r.id))
        sched = self.scheduler
        idx = 0
        n = len(arrivals)
        count = 0
        offline_done_at = 0.0
        offline_tokens = 0
        while True:
            while idx < n and arrivals[idx].arrival_time <= self.clock:
                r = arrivals[idx]
                if r.is_online:
                    sched.add_online(r)
                else:
                    sched.add_offline(r)
                idx += 1
            if not sched.pending():
                if idx < n:
                    self.clock = arrivals[idx].arrival_time
                    continue
                break
            self._update_threshold()
            plan = sched.build(self.clock)
            if not plan.items:
                if idx < n:
                    self.clock = max(self.clock, arrivals[idx].arrival_time)
                    continue
                if sched.running:
                    # nothing can make progress: give up the newest slot
                    sched.preempt(sched.running[-1], self.clock)
                    continue
                raise RuntimeError("simulation stalled with pending requests")
            t_true = estimate_plan_time(plan, cfg.params_true)
            if cfg.noise_std > 0:
                t_true *= max(1.0 + float(self.rng.normal(0.0, cfg.noise_std)), 0.1)
            for adm in plan.admissions:
                if not adm.online and adm.request_id not in self._first_admission:
                    self._first_admission[adm.request_id] = (self.clock, adm.hit_tokens, adm.prompt_len)
            start = self.clock
            end = start + t_true
            if self.plans_hook is not None:
                self.plans_hook(plan, t_true)
            done = sched.complete(plan, end)
            for r in done:
                if not r.is_online:
                    offline_done_at = end
                    offline_tokens += r.prompt_len + r.decode_done
            occ = self.cache.occupancy_report()
            active_on = sum(1 for r in sched.running if r.is_online)
            self.iterations.append(
                IterationRecord(
                    iteration=count,
                    clock_s=start,
                    time_s=t_true,
                    benefit=plan.scheduled_tokens,
                    punishment=plan.punishment_tokens,
                    occupied=occ.running_occupied,
                    online_free=occ.online_free,
                    offline_free=occ.offline_free,
                    active_online=active_on,
                    active_offline=len(sched.running) - active_on,
                    est_time_s=plan.est_time,
                    budget_s=plan.budget,
                    slo_budget_s=plan.slo_budget,
                    slo_risk=plan.slo_risk,
                    threshold=self.cache.threshold_tokens,
                )
            )
            self.clock = end
            count += 1
            if count >= cfg.max_iterations:
                raise RuntimeError(f"iteration limit {cfg.max_iterations} reached")
        reqs = sorted(online_reqs + offline_reqs, key=lambda r: r.id)
        adm = [self._first_admission[k] for k in sorted(self._first_admission)]
        adm.sort(key=lambda x: x[0])
        return Metrics(
            requests=[_record(r, cfg.slo) for r in reqs],
            iterations=self.iterations,
            offline_admissions=adm,
            sim_time_s=self.clock,
            offline_makespan_s=offline_done_at,
            offline_tokens=offline_tokens,
        )


def run(online: Sequence[TraceEvent], offline: Sequence[TraceEvent], config: EngineConfig) -> Metrics:
    return Engine(config).run(online, offline)


def estimate_offline_throughput(
    config: EngineConfig, online: Sequence[TraceEvent], offline: Sequence[TraceEvent]
) -> float:
    """Completed offline tokens per simulated second at the given resources."""
    return run(online, offline, config).throughput_tok_s


# --------------------------------------------------------------------------
# capacity planning


def peak_window(events: Sequence[TraceEvent], window_s: float = 300.0) -> tuple:
    """Start of the ``window_s`` span holding the most online arrivals."""
    ts = [e.ts for e in events if e.kind is RequestKind.ONLINE]
    if not ts:
        raise EngineConfigError("trace has no online requests")
    best, best_start = 0, ts[0]
    j = 0
    for i, t in enumerate(ts):
        while ts[j] <= t - window_s:
            j += 1
        if i - j + 1 > best:
            best = i - j + 1
            best_start = ts[j]
    return best_start, best


def window_events(events: Sequence[TraceEvent], start: float, window_s: float) -> list:
    return [
        replace(e, ts=e.ts - start)
        for e in events
        if e.kind is RequestKind.ONLINE and start <= e.ts < start + window_s
    ]


def default_ladder(n_capacities: int = 8, base: int = 4096, speeds=(1.0, 2.0, 4.0)) -> list:
    return [(base * 2**k, float(s)) for s in speeds for k in range(n_capacities)]


@dataclass(frozen=True)
class CapacityRung:
    index: int
    capacity_tokens: int
    speed: float
    attainment: float


@dataclass
class CapacityPlan:
    chosen: CapacityRung
    tried: list
    window_start_s: float
    window_requests: int


def plan_capacity(
    online: Sequence[TraceEvent],
    slo: SloConfig,
    template: EngineConfig,
    ladder: Optional[Sequence[tuple]] = None,
    window_s: float = 300.0,
) -> CapacityPlan:
    """Smallest rung whose online-only attainment on the peak window meets the target."""
    ladder = list(ladder) if ladder is not None else default_ladder()
    start, count = peak_window(online, window_s)
    events = window_events(online, start, window_s)
    tried = []
    for i, (cap, speed) in enumerate(ladder):
        cfg = replace(
            template,
            capacity_tokens=int(cap),
            slo=slo,
            params_true=template.params_true.scaled(speed),
            params_est=template.estimator.scaled(speed),
        )
        try:
            att = run(events, [], cfg).attainment
        except EngineConfigError:
            att = 0.0
        rung = CapacityRung(i, int(cap), float(speed), att)
        tried.append(rung)
        if att >= slo.attainment_target:
            return CapacityPlan(rung, tried, start, count)
    best = max(tried, key=lambda r: (r.attainment, -r.index)) if tried else None
    raise ExhaustedLadder(
        f"no rung meets attainment {slo.attainment_target:.3f}; best "
        + (f"{best.attainment:.3f} at capacity {best.capacity_tokens}, speed {best.speed}" if best else "none"),
        best,
    )
