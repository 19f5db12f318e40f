"""Per-iteration batch construction for mixed online/offline serving.

Both policies share the same skeleton:

1. running online requests get their next step;
2. waiting online requests are admitted first-come first-served while the
   time budget and memory allow, preempting offline work for memory;
3. running offline requests get their next step, sized to what is left;
4. new offline work is added, either strictly in pool order (``fcfs``) or
   by greedy reward-improving moves seeded from the current batch
   (``kv_aware``).

The reward of a plan is (scheduled tokens - punished tokens) / modeled time.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .costmodel import CostModelParams, batch_time, decode_time, prefill_time
from .kvcache import EvictionImpossible, KVCache
from .workload import Request, RequestState

INF = math.inf


@dataclass(frozen=True)
class SloConfig:
    ttft: float = 1.0
    tpot: float = 0.05
    attainment_target: float = 0.9

    def __post_init__(self):
        if not (self.ttft > 0 and self.tpot > 0):
            raise ValueError("ttft and tpot must be positive")
        if not 0 < self.attainment_target <= 1:
            raise ValueError("attainment_target must be in (0, 1]")


POLICIES = ("fcfs", "kv_aware")


@dataclass
class SchedulerConfig:
    policy: str = "kv_aware"
    slo_aware: bool = True
    chunk_size: int = 512
    online_chunk_size: Optional[int] = None  # None: online prompts run whole
    max_batched_tokens: int = 4096
    max_batch_requests: int = 256
    max_moves: int = 8
    candidates_per_bucket: int = 4
    bucket_edges: tuple = (2048, 8192, 32768)
    regularity: float = 0.5
    headroom: float = 0.9
    max_iteration_s: Optional[float] = None  # None: a quarter of the TTFT target
    defer_inflight: bool = True
    reserve_prompt: bool = True  # admission allocates the whole remaining prompt
    reference_aware: bool = True  # reward charges evictions of still-referenced blocks

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.chunk_size < 1 or self.max_batched_tokens < 1 or self.max_batch_requests < 1:
            raise ValueError("chunk_size, max_batched_tokens and max_batch_requests must be >= 1")
        if self.online_chunk_size is not None and self.online_chunk_size < 1:
            raise ValueError("online_chunk_size must be >= 1")
        if self.max_moves < 0 or self.candidates_per_bucket < 1:
            raise ValueError("max_moves must be >= 0 and candidates_per_bucket >= 1")
        if not 0 < self.headroom <= 1:
            raise ValueError("headroom must be in (0, 1]")
        if self.regularity < 0:
            raise ValueError("regularity must be non-negative")
        if list(self.bucket_edges) != sorted(self.bucket_edges):
            raise ValueError("bucket_edges must be ascending")


# --------------------------------------------------------------------------
# plans


@dataclass
class WorkItem:
    request: Request
    start: int
    end: int

    @property
    def tokens(self) -> int:
        return self.end - self.start

    @property
    def is_decode(self) -> bool:
        return self.end - self.start == 1 and self.start >= self.request.prompt_len

    def prefill_cost(self, params: CostModelParams) -> float:
        return 0.0 if self.is_decode else prefill_time(self.start, self.end, params)


@dataclass
class Move:
    kind: str  # "add"
    request_id: int
    reward: float
    start: int = 0
    end: int = 0


@dataclass
class Admission:
    request_id: int
    online: bool
    hit_tokens: int
    prompt_len: int


@dataclass
class BatchPlan:
    now: float
    items: list = field(default_factory=list)
    evicted: list = field(default_factory=list)
    punishment_tokens: int = 0
    preempted: list = field(default_factory=list)
    admissions: list = field(default_factory=list)
    moves: list = field(default_factory=list)
    budget: float = INF  # planning budget the plan was fitted to
    slo_budget: float = INF  # tightest token deadline slack, may be negative
    slo_risk: bool = False
    est_time: float = 0.0

    def prefill_spans(self) -> list:
        return [(it.start, it.end) for it in self.items if not it.is_decode]

    def decode_lens(self) -> list:
        return [it.end for it in self.items if it.is_decode]

    @property
    def prefill_items(self) -> list:
        return [(it.request.id, it.start, it.end) for it in self.items if not it.is_decode]

    @property
    def decode_items(self) -> list:
        return [it.request.id for it in self.items if it.is_decode]

    @property
    def scheduled_tokens(self) -> int:
        return sum(it.tokens for it in self.items)

    @property
    def request_ids(self) -> list:
        return [it.request.id for it in self.items]

    def __len__(self) -> int:
        return len(self.items)


def slo_budget(running_online: Iterable[Request], now: float, slo: SloConfig) -> float:
    """Slack to the tightest next-token deadline ``arrival + ttft + i * tpot``."""
    best = INF
    for r in running_online:
        i = r.decode_done + 1
        best = min(best, slo.ttft + i * slo.tpot - (now - r.arrival_time))
    return best


def token_deadline(r: Request, slo: SloConfig) -> float:
    """Absolute deadline of the next token that keeps TTFT and mean TPOT in target.

    The first token is due ``ttft`` after arrival.  Token ``i`` is due
    ``(i - 1) * tpot`` after the first, which keeps the mean gap at or
    below ``tpot`` while letting early tokens bank slack.
    """
    i = r.decode_done + 1
    d = r.arrival_time + slo.ttft + i * slo.tpot
    if r.first_token_time is None:
        return min(d, r.arrival_time + slo.ttft)
    return min(d, r.first_token_time + (i - 1) * slo.tpot)


def benefit(plan: BatchPlan) -> int:
    return plan.scheduled_tokens


def punishment(evictions) -> int:
    """Punished tokens of an eviction outcome, a list of outcomes, or a plan."""
    if isinstance(evictions, BatchPlan):
        return evictions.punishment_tokens
    if hasattr(evictions, "punishment_tokens"):
        return evictions.punishment_tokens
    return sum(e.punishment_tokens for e in evictions)


def reward_value(benefit_tokens: int, punish_tokens: int, time_s: float) -> float:
    if not time_s > 0:
        raise ValueError("estimated time must be positive")
    return (benefit_tokens - punish_tokens) / time_s


def iteration_reward(plan: BatchPlan, estimated_time: float) -> float:
    return reward_value(benefit(plan), punishment(plan), estimated_time)


# --------------------------------------------------------------------------
# offline pool


class OfflinePool:
    """Waiting and preempted offline requests, bucketed by prompt length.

    Prefix lookups go through the cache's shared trie; each bucket keeps its
    members in arrival (id) order.
    """

    def __init__(self, edges: Sequence[int] = (2048, 8192, 32768)):
        self.edges = tuple(edges)
        self.buckets = [[] for _ in range(len(self.edges) + 1)]
        self._keys = [[] for _ in range(len(self.edges) + 1)]
        self._where = {}

    def bucket_of(self, r: Request) -> int:
        return bisect.bisect_right(self.edges, r.prompt_len)

    def bucket_range(self, b: int) -> tuple:
        lo = self.edges[b - 1] if b > 0 else 0
        hi = self.edges[b] if b < len(self.edges) else INF
        return lo, hi

    def add(self, r: Request) -> None:
        if r.id in self._where:
            raise ValueError(f"request {r.id} already pooled")
        b = self.bucket_of(r)
        i = bisect.bisect_left(self._keys[b], r.id)
        self._keys[b].insert(i, r.id)
        self.buckets[b].insert(i, r)
        self._where[r.id] = b

    def remove(self, r: Request) -> None:
        b = self._where.pop(r.id)
        i = bisect.bisect_left(self._keys[b], r.id)
        del self._keys[b][i]
        del self.buckets[b][i]

    def __contains__(self, r) -> bool:
        return r.id in self._where

    def __len__(self) -> int:
        return len(self._where)

    def fcfs(self) -> list:
        out = [r for bucket in self.buckets for r in bucket]
        out.sort(key=lambda r: r.id)
        return out


@dataclass
class Candidate:
    request: Request
    chain: list
    hit_blocks: int
    bucket: int
    _hit_ids: Optional[list] = None
    _unpinned: Optional[list] = None

    @property
    def next_node(self):
        return self.chain[self.hit_blocks] if self.hit_blocks < len(self.chain) else None

    def hit_ids(self) -> list:
        if self._hit_ids is None:
            self._hit_ids = [n.block.id for n in self.chain[: self.hit_blocks]]
        return self._hit_ids

    def unpinned_hits(self, cache: KVCache) -> list:
        if self._unpinned is None:
            self._unpinned = [
                n.block.id for n in self.chain[: self.hit_blocks] if n.block.holders == 0
            ]
        return self._unpinned


def _candidate(cache: KVCache, r: Request, bucket: int) -> Candidate:
    limit = (r.seq_len - 1) // cache.block_size
    chain = cache.offline_chain(r)
    hit = cache.resident_prefix(chain[:limit]) if limit < len(chain) else cache.resident_prefix(chain)
    return Candidate(r, chain, min(hit, limit), bucket)


def select_offline_candidates(
    pool: OfflinePool,
    cache: KVCache,
    k: int,
    batch_mean_len: Optional[float] = None,
    regularity: float = 0.5,
    claimed: frozenset = frozenset(),
    defer_inflight: bool = True,
) -> list:
    """Up to ``k`` requests per bucket with the longest resident prefix.

    Ties go to the earlier arrival.  When the batch has a mean context
    length, buckets overlapping ``mean * (1 +/- regularity)`` are preferred.
    Requests whose next prefix block is being computed by another request
    (``claimed`` or in flight) wait, so the block is computed once.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    per_bucket = []
    for b, bucket in enumerate(pool.buckets):
        cands = []
        for r in bucket:
            c = _candidate(cache, r, b)
            if defer_inflight:
                nxt = c.next_node
                if nxt is not None and (nxt.inflight > 0 or id(nxt) in claimed):
                    continue
            cands.append(c)
        cands.sort(key=lambda c: (-c.hit_blocks, c.request.id))
        per_bucket.append(cands[:k])
    if batch_mean_len is not None and batch_mean_len > 0:
        lo = batch_mean_len * (1 - regularity)
        hi = batch_mean_len * (1 + regularity)
        preferred = []
        for b, cands in enumerate(per_bucket):
            blo, bhi = pool.bucket_range(b)
            if blo <= hi and bhi >= lo:
                preferred.extend(cands)
        if preferred:
            return sorted(preferred, key=lambda c: c.request.id)
    out = [c for cands in per_bucket for c in cands]
    out.sort(key=lambda c: c.request.id)
    return out


# --------------------------------------------------------------------------
# planning state


class _Acc:
    """Running totals of a plan; sums follow item order."""

    __slots__ = ("params", "prefill", "dec_sum", "dec_max", "dec_n", "tokens")

    def __init__(self, params):
        self.params = params
        self.prefill = 0.0
        self.dec_sum = 0
        self.dec_max = 0
        self.dec_n = 0
        self.tokens = 0

    def add(self, item: WorkItem) -> None:
        self.tokens += item.tokens
        if item.is_decode:
            self.dec_sum += item.end
            self.dec_n += 1
            if item.end > self.dec_max:
                self.dec_max = item.end
        else:
            self.prefill += prefill_time(item.start, item.end, self.params)

    def time_with(self, p_extra: float = 0.0, dec_len: int = 0) -> float:
        pre = self.prefill + p_extra if p_extra else self.prefill
        n = self.dec_n + (1 if dec_len else 0)
        if n:
            mx = max(self.dec_max, dec_len)
            d = decode_time_fast(self.params, mx, self.dec_sum + dec_len, n)
        else:
            d = 0.0
        if pre == 0 and d == 0:
            return 0.0
        return batch_time(pre, d, self.params)

    def time(self) -> float:
        return self.time_with()


def decode_time_fast(params: CostModelParams, mx: int, total: int, n: int) -> float:
    # same arithmetic as costmodel.decode_time on the list
    return params.gamma * mx + params.delta * (total / n)


def plan_time(items: Sequence[WorkItem], params: CostModelParams) -> float:
    acc = _Acc(params)
    for it in items:
        acc.add(it)
    return acc.time()


class _Ctx:
    def __init__(self, sched: "Scheduler", now: float, unbounded: bool = False):
        self.s = sched
        self.now = now
        self.unbounded = unbounded  # ignore deadlines entirely
        self.plan = BatchPlan(now)
        self.acc = _Acc(sched.params)
        self.raw = INF  # slack to the tightest pending deadline
        self.late = False
        self.online_only = False

    @property
    def budget(self) -> float:
        cfg = self.s.config
        if not cfg.slo_aware or self.unbounded:
            return INF
        return cfg.headroom * min(self.raw, self.s.max_iteration_s)

    def tighten(self, r: Request) -> None:
        slack = token_deadline(r, self.s.slo) - self.now
        if slack <= 0:
            self.late = True
        else:
            self.raw = min(self.raw, slack)

    def with_deadline(self, r: Request) -> float:
        cfg = self.s.config
        if not cfg.slo_aware or self.unbounded:
            return INF
        slack = token_deadline(r, self.s.slo) - self.now
        raw = self.raw if slack <= 0 else min(self.raw, slack)
        return cfg.headroom * min(raw, self.s.max_iteration_s)

    def push(self, item: WorkItem) -> None:
        self.plan.items.append(item)
        self.acc.add(item)

    @property
    def cap_left(self) -> int:
        return self.s.config.max_batched_tokens - self.acc.tokens


# --------------------------------------------------------------------------
# scheduler


class Scheduler:
    def __init__(
        self,
        cache: KVCache,
        params: CostModelParams,
        slo: SloConfig = SloConfig(),
        config: Optional[SchedulerConfig] = None,
    ):
        self.cache = cache
        self.params = params
        self.slo = slo
        self.config = config or SchedulerConfig()
        self.config.validate()
        self.running = []  # admission order
        self.online_queue = deque()
        self.pool = OfflinePool(self.config.bucket_edges)
        self._last_plan = None

    @property
    def max_iteration_s(self) -> float:
        m = self.config.max_iteration_s
        return self.slo.ttft / 4 if m is None else m

    # ------------------------------------------------------------ intake

    def add_online(self, r: Request) -> None:
        r.state = RequestState.WAITING
        if self.online_queue and self.online_queue[-1].arrival_time > r.arrival_time:
            items = list(self.online_queue) + [r]
            items.sort(key=lambda x: (x.arrival_time, x.id))
            self.online_queue = deque(items)
        else:
            self.online_queue.append(r)

    def add_offline(self, r: Request) -> None:
        r.state = RequestState.WAITING
        self.cache.register_offline(r)
        self.pool.add(r)

    def pending(self) -> bool:
        return bool(self.running or self.online_queue or len(self.pool))

    # ---------------------------------------------------------- helpers

    def _chunk_end(self, ctx: _Ctx, r: Request, start: int, budget: float, online: bool) -> Optional[int]:
        """Largest feasible end of the next step of ``r`` starting at ``start``."""
        seq = r.seq_len
        rem = seq - start
        cap = ctx.cap_left
        if cap < 1:
            return None
        acc = ctx.acc
        if rem == 1 and start >= r.prompt_len:
            return seq if acc.time_with(0.0, seq) <= budget else None
        if online:
            limit = self.config.online_chunk_size or rem
        else:
            limit = self.config.chunk_size
        limit = min(limit, cap)

        def fits(e):
            return acc.time_with(prefill_time(start, e, self.params)) <= budget

        if rem <= limit:
            if fits(seq):
                return seq
            if online and self.config.online_chunk_size is None:
                return None
        bs = self.cache.block_size
        hi = min(limit, rem - 1) // bs  # in blocks
        lo = 1
        if hi < lo or not fits(start + lo * bs):
            return None
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if fits(start + mid * bs):
                lo = mid
            else:
                hi = mid - 1
        return start + lo * bs

    def _alloc_end(self, r: Request, end: int) -> int:
        """Token extent to hold in memory when ``r`` is admitted with a step ending at ``end``."""
        return max(end, r.prompt_len) if self.config.reserve_prompt else end

    def _liveness(self) -> bool:
        """The threshold never blocks the only offline request."""
        return not any(not r.is_online for r in self.running)

    def _attach(self, ctx: _Ctx, r: Request, budget: float) -> Optional[WorkItem]:
        """Admit ``r`` if time, tokens and memory allow; no state change otherwise."""
        cache = self.cache
        online = r.is_online
        blocks, hit = cache.hit_for(r)
        end = self._chunk_end(ctx, r, hit, budget, online)
        if end is None:
            return None
        need = cache.blocks_for(self._alloc_end(r, end)) - len(blocks)
        enforce = not online and not self._liveness()
        if enforce:
            extra = sum(1 for b in blocks if cache.blocks[b].holders == 0)
            if cache.offline_pinned_blocks + extra + need > cache.threshold_blocks:
                return None
        deficit = cache.resident_blocks + need - cache.capacity_blocks
        if deficit > 0:
            try:
                res = cache.evict(deficit * cache.block_size, ctx.now, exclude=blocks)
            except EvictionImpossible:
                return None
            ctx.plan.evicted.extend(res.victims)
            ctx.plan.punishment_tokens += res.punishment_tokens
        self._start(ctx, r)
        got = cache.grow(r, need, ctx.now, enforce_threshold=False)
        assert got.__class__.__name__ == "Allocation", got
        item = WorkItem(r, r.num_computed, end)
        ctx.push(item)
        return item

    def _start(self, ctx: _Ctx, r: Request) -> None:
        if r.state is RequestState.PREEMPTED:
            r.recompute_tokens += r.cold_tokens
        h = self.cache.start_request(r, ctx.now)
        r.cold_tokens = 0
        r.hit_tokens = min(h, r.prompt_len)
        r.state = RequestState.RUNNING
        self.running.append(r)
        if not r.is_online:
            self.pool.remove(r)
        ctx.plan.admissions.append(Admission(r.id, r.is_online, h, r.prompt_len))

    def _grow_member(self, ctx: _Ctx, r: Request, end: int) -> Optional[bool]:
        """Allocate blocks for a running member's step; False when memory is short."""
        cache = self.cache
        need = cache.blocks_for(end) - cache.held_blocks(r)
        if need <= 0:
            return True
        if not r.is_online and not self._liveness_member(r):
            extra = cache.offline_pinned_blocks + need - cache.threshold_blocks
            if extra > 0:
                return False
        deficit = cache.resident_blocks + need - cache.capacity_blocks
        if deficit > 0:
            try:
                res = cache.evict(deficit * cache.block_size, ctx.now)
            except EvictionImpossible:
                return False
            ctx.plan.evicted.extend(res.victims)
            ctx.plan.punishment_tokens += res.punishment_tokens
        cache.grow(r, need, ctx.now, enforce_threshold=False)
        return True

    def _liveness_member(self, r: Request) -> bool:
        return all(m is r or m.is_online for m in self.running)

    def preempt(self, r: Request, now: float, plan: Optional[BatchPlan] = None) -> None:
        """Release ``r``'s slot; its cached blocks stay until evicted."""
        if r not in self.running:
            raise KeyError(f"request {r.id} is not running")
        self.running.remove(r)
        self.cache.release_request(r, now)
        r.state = RequestState.PREEMPTED
        if plan is not None:
            plan.items = [it for it in plan.items if it.request is not r]
            plan.preempted.append(r.id)
        if r.is_online:
            self.add_online_front(r)
        else:
            self.pool.add(r)

    def add_online_front(self, r: Request) -> None:
        items = list(self.online_queue) + [r]
        items.sort(key=lambda x: (x.arrival_time, x.id))
        self.online_queue = deque(items)

    def preempt_offline(self, plan: BatchPlan, victim_id: int) -> None:
        for r in self.running:
            if r.id == victim_id and not r.is_online:
                self.preempt(r, plan.now, plan)
                return
        raise KeyError(f"offline request {victim_id} is not in the batch")

    def _victim(self, exclude=()) -> Optional[Request]:
        offline = [r for r in self.running if not r.is_online and r not in exclude]
        if not offline:
            return None
        if self.config.policy == "fcfs":
            return offline[-1]
        # the member whose removal leaves the last batch with the best reward;
        # newest first among ties
        order = {id(r): i for i, r in enumerate(offline)}
        return max(offline, key=lambda r: (self.reward_without(r), order[id(r)]))

    def reward_without(self, r: Request) -> float:
        """Reward of the previous iteration's batch with ``r``'s work taken out."""
        acc = _Acc(self.params)
        if self._last_plan is not None:
            for it in self._last_plan.items:
                if it.request is not r:
                    acc.add(it)
        t = acc.time()
        return acc.tokens / t if t > 0 else 0.0

    def _rebuild_acc(self, ctx: _Ctx) -> None:
        ctx.acc = _Acc(self.params)
        for it in ctx.plan.items:
            ctx.acc.add(it)

    # ------------------------------------------------------------- build

    def build(self, now: float) -> BatchPlan:
        plan = self._build(now, False)
        if not plan.items and self.pending():
            # no step fits any deadline: run late rather than stall
            budget = plan.budget
            plan = self._build(now, True)
            plan.budget = budget
            plan.slo_risk = True
        return plan

    def _build(self, now: float, unbounded: bool) -> BatchPlan:
        ctx = self.prepare(now, unbounded)
        if self.config.policy == "kv_aware" and not ctx.online_only:
            self.commit(ctx, self.adjust(ctx))
        elif not ctx.online_only:
            self._fcfs_offline(ctx)
        return self.finalize(ctx)

    def prepare(self, now: float, unbounded: bool = False) -> _Ctx:
        """Phases shared by both policies; all effects are committed."""
        ctx = _Ctx(self, now, unbounded)
        plan = ctx.plan
        plan.slo_budget = slo_budget([r for r in self.running if r.is_online], now, self.slo)
        for r in self.running:
            if r.is_online:
                ctx.tighten(r)
        if ctx.late and self.config.slo_aware:
            ctx.online_only = True
            plan.slo_risk = True

        # running online requests
        for r in [m for m in self.running if m.is_online]:
            start = r.num_computed
            end = self._chunk_end(ctx, r, start, INF, True)
            if end is None:
                continue
            while not self._grow_member(ctx, r, end):
                victim = self._victim()
                if victim is None:
                    end = None
                    break
                self.preempt(victim, now, plan)
            if end is not None:
                ctx.push(WorkItem(r, start, end))

        # waiting online requests, first come first served
        while self.online_queue:
            r = self.online_queue[0]
            if len(self.running) >= self.config.max_batch_requests:
                victim = self._victim()
                if victim is None:
                    break
                self.preempt(victim, now, plan)
            budget = ctx.with_deadline(r)
            item = None
            while True:
                item = self._attach(ctx, r, budget)
                if item is not None:
                    break
                if self._chunk_end(ctx, r, self.cache.hit_for(r)[1], budget, True) is None:
                    break  # time or token budget, not memory
                victim = self._victim()
                if victim is None:
                    break
                self.preempt(victim, now, plan)
            if item is None:
                break
            self.online_queue.popleft()
            ctx.tighten(r)
            if token_deadline(r, self.slo) <= now:
                plan.slo_risk = True

        if ctx.online_only:
            return ctx

        # running offline requests
        for r in [m for m in self.running if not m.is_online]:
            start = r.num_computed
            end = self._chunk_end(ctx, r, start, ctx.budget, False)
            if end is None:
                continue  # idle this iteration, keeps its memory
            if not self._grow_member(ctx, r, end):
                self.preempt(r, now, plan)
                continue
            ctx.push(WorkItem(r, start, end))
        return ctx

    def _fcfs_offline(self, ctx: _Ctx) -> None:
        for r in self.pool.fcfs():
            if len(self.running) >= self.config.max_batch_requests:
                break
            if self._attach(ctx, r, ctx.budget) is None:
                break

    def finalize(self, ctx: _Ctx) -> BatchPlan:
        plan = ctx.plan
        plan.budget = ctx.budget
        plan.est_time = ctx.acc.time()
        self._last_plan = plan
        return plan

    # ---------------------------------------------------------- greedy moves

    def _offline_members(self, ctx: _Ctx) -> list:
        return [it for it in ctx.plan.items if not it.request.is_online]

    def candidates(self, ctx: _Ctx, claimed=frozenset()) -> list:
        items = ctx.plan.items
        mean_len = (sum(it.end for it in items) / len(items)) if items else None
        return select_offline_candidates(
            self.pool,
            self.cache,
            self.config.candidates_per_bucket,
            mean_len,
            self.config.regularity,
            claimed,
            self.config.defer_inflight,
        )

    def adjust(self, ctx: _Ctx) -> "Adjustment":
        """Greedy single-move improvement of the plan; nothing is committed."""
        return _Greedy(self, ctx).run()

    def commit(self, ctx: _Ctx, adj: "Adjustment") -> None:
        cache = self.cache
        plan = ctx.plan
        plan.moves.extend(adj.moves)
        for c, end in adj.adds:
            self._start(ctx, c.request)
        if adj.deficit > 0:
            res = cache.evict(adj.deficit * cache.block_size, ctx.now)
            plan.evicted.extend(res.victims)
            plan.punishment_tokens += res.punishment_tokens
        for c, end in adj.adds:
            r = c.request
            need = cache.blocks_for(self._alloc_end(r, end)) - cache.held_blocks(r)
            if need > 0:
                got = cache.grow(r, need, ctx.now, enforce_threshold=False)
                assert got.__class__.__name__ == "Allocation", got
            plan.items.append(WorkItem(r, r.num_computed, end))
        self._rebuild_acc(ctx)

    # ------------------------------------------------------------ effects

    def complete(self, plan: BatchPlan, now: float) -> list:
        """Apply a finished iteration; returns requests that completed."""
        done = []
        for it in plan.items:
            r = it.request
            if r.num_computed != it.start:
                raise RuntimeError(f"request {r.id}: plan starts at {it.start}, KV at {r.num_computed}")
            r.num_computed = it.end
            if it.start < r.prompt_len:
                r.cold_tokens += min(it.end, r.prompt_len) - it.start
            self.cache.commit_computed(r, now)
            if it.end == r.seq_len:
                r.emit_token(now)
            if r.finished:
                self.running.remove(r)
                self.cache.release_request(r, now)
                if not r.is_online:
                    self.cache.unregister_offline(r)
                done.append(r)
        return done


@dataclass
class Adjustment:
    moves: list
    adds: list  # (Candidate, end)
    deficit: int
    reward: float


class _Greedy:
    def __init__(self, sched: Scheduler, ctx: _Ctx):
        self.s = sched
        self.ctx = ctx
        self.cache = sched.cache
        self.params = sched.params
        self.view = None

    def _view(self):
        if self.view is None:
            self.view = self.cache.eviction_view()
        return self.view

    def run(self) -> Adjustment:
        s, ctx, cache = self.s, self.ctx, self.cache
        cfg = s.config
        aware = cfg.reference_aware
        committed_pun = ctx.plan.punishment_tokens if aware else 0
        budget = ctx.budget
        adds = []  # (Candidate, end, need)
        claimed = set()
        excl = set()
        pins = set()
        new_blocks = 0
        cur_pun = 0
        nreq = len(s.running)
        liveness = s._liveness()
        moves = []

        acc = _Acc(self.params)
        for it in ctx.plan.items:
            acc.add(it)
        t0 = acc.time()
        cur = (acc.tokens - committed_pun) / t0 if t0 > 0 else 0.0
        cands = s.candidates(ctx) if cfg.max_moves > 0 else []

        for _ in range(cfg.max_moves):
            if nreq + len(adds) + 1 > cfg.max_batch_requests:
                break
            best = None
            for c in cands:
                if any(c is a[0] for a in adds):
                    continue
                nxt = c.next_node
                if cfg.defer_inflight and nxt is not None and id(nxt) in claimed:
                    continue
                r = c.request
                start = c.hit_blocks * cache.block_size
                # reuse the chunk rule against the trial totals
                saved = ctx.acc
                ctx.acc = acc
                try:
                    end = s._chunk_end(ctx, r, start, budget, False)
                finally:
                    ctx.acc = saved
                if end is None:
                    continue
                need = cache.blocks_for(s._alloc_end(r, end)) - c.hit_blocks
                if not (liveness and not adds):
                    extra = sum(1 for b in c.unpinned_hits(cache) if b not in pins)
                    if cache.offline_pinned_blocks + len(pins) + extra + new_blocks + need > cache.threshold_blocks:
                        continue
                deficit = cache.resident_blocks + new_blocks + need - cache.capacity_blocks
                pun = cur_pun
                if deficit > 0:
                    victims = self._take(deficit, excl, set(c.hit_ids()))
                    if victims is None:
                        continue
                    pun = self._punish(victims) if aware else 0
                item = WorkItem(r, start, end)
                if item.is_decode:
                    t = acc.time_with(0.0, end)
                else:
                    t = acc.time_with(prefill_time(start, end, self.params))
                val = (acc.tokens + item.tokens - committed_pun - pun) / t
                if best is None or val > best[0]:
                    best = (val, c, item, need, pun)
            if best is None or not best[0] > cur:
                break
            val, c, item, need, pun = best
            adds.append((c, item.end, need))
            excl.update(c.hit_ids())
            pins.update(c.unpinned_hits(cache))
            new_blocks += need
            cur_pun = pun
            if c.next_node is not None:
                claimed.add(id(c.next_node))
            moves.append(Move("add", c.request.id, val, item.start, item.end))
            acc.add(item)
            cur = val

        deficit = cache.resident_blocks + new_blocks - cache.capacity_blocks
        return Adjustment(moves, [(c, end) for c, end, _ in adds], max(deficit, 0), cur)

    def _take(self, n: int, excl: set, extra: set):
        view = self._view()
        out = []
        i = 0
        order = view._order
        while len(out) < n:
            if i == len(order):
                if view._done or not view._advance():
                    return None
            bid, pun = order[i]
            i += 1
            if bid not in excl and bid not in extra:
                out.append((bid, pun))
        return out

    def _punish(self, victims) -> int:
        return sum(self.cache.block_size for _, p in victims if p)
