"""Exhaustive single-move oracle for the kv_aware batch adjustment.

Each candidate is scored by committing it on a deep copy of the scheduler
with real cache operations, then timing the batch with the cost model.
Nothing here reuses the greedy's trial bookkeeping or eviction view.
"""

from __future__ import annotations

import copy
import math
import sys

import numpy as np

from cachesim import make_request
from hybridserve.costmodel import CostModelParams, batch_components_time
from hybridserve.kvcache import EvictionImpossible, EvictionPolicy, KVCache
from hybridserve.scheduler import Scheduler, SchedulerConfig, SloConfig

P = CostModelParams()
BS = 16

# deep copies walk long trie chains recursively
sys.setrecursionlimit(max(sys.getrecursionlimit(), 20_000))


def batch_seconds(items):
    spans, lens = [], []
    for r, s, e in items:
        if e - s == 1 and s >= r.prompt_len:
            lens.append(e)
        else:
            spans.append((s, e))
    if not spans and not lens:
        return 0.0
    return batch_components_time(spans, lens, P)


def step_end(sched, items, r, start, budget):
    """Largest allowed step end for ``r`` by brute force over block-aligned ends."""
    cfg = sched.config
    cap = cfg.max_batched_tokens - sum(e - s for _, s, e in items)
    if cap < 1:
        return None
    seq = r.seq_len
    rem = seq - start

    def fits(e):
        return batch_seconds(items + [(r, start, e)]) <= budget

    if rem == 1 and start >= r.prompt_len:
        return seq if fits(seq) else None
    limit = min(cfg.chunk_size, cap)
    if rem <= limit and fits(seq):
        return seq
    bs = sched.cache.block_size
    ends = [start + k * bs for k in range(1, min(limit, rem - 1) // bs + 1)]
    good = [e for e in ends if fits(e)]
    return max(good) if good else None


def score(snapshot, add_ids):
    """(reward, end of the last add) after committing ``add_ids``; None if infeasible."""
    sched, ctx = copy.deepcopy(snapshot)
    cache, cfg = sched.cache, sched.config
    items = [(it.request, it.start, it.end) for it in ctx.plan.items]
    alone = not any(not m.is_online for m in sched.running)
    if add_ids and len(sched.running) + len(add_ids) > cfg.max_batch_requests:
        return None
    by_id = {r.id: r for bucket in sched.pool.buckets for r in bucket}
    adds = []
    for rid in add_ids:
        r = by_id[rid]
        cache.start_request(r, ctx.now)
        end = step_end(sched, items, r, r.num_computed, ctx.budget)
        if end is None:
            return None
        items.append((r, r.num_computed, end))
        adds.append((r, end))
    need = sum(cache.blocks_for(max(end, r.prompt_len)) - cache.held_blocks(r) for r, end in adds)
    # the threshold never blocks a lone offline admission
    if adds and not (alone and len(adds) == 1):
        if cache.offline_pinned_blocks + need > cache.threshold_blocks:
            return None
    pun = 0
    deficit = cache.resident_blocks + need - cache.capacity_blocks
    if deficit > 0:
        try:
            pun = cache.evict(deficit * cache.block_size, ctx.now).punishment_tokens
        except EvictionImpossible:
            return None
    committed = ctx.plan.punishment_tokens
    if not cfg.reference_aware:
        committed = pun = 0
    tokens = sum(e - s for _, s, e in items)
    t = batch_seconds(items)
    if not adds:
        return ((tokens - committed) / t if t > 0 else 0.0), None
    return (tokens - committed - pun) / t, adds[-1][1]


def random_state(seed, max_pool=6):
    """A warmed-up scheduler with 1..max_pool waiting offline requests."""
    rng = np.random.default_rng(seed)
    cap_blocks = int(rng.integers(40, 400))
    policy = EvictionPolicy.TASK_AWARE if rng.random() < 0.7 else EvictionPolicy.LRU
    cache = KVCache(cap_blocks * BS, BS, policy)
    edges = rng.choice([256, 1024, 4096], size=int(rng.integers(0, 3)), replace=False)
    cfg = SchedulerConfig(
        policy="kv_aware",
        candidates_per_bucket=6,
        defer_inflight=False,
        chunk_size=int(rng.choice([64, 256, 512])),
        max_moves=int(rng.integers(1, 9)),
        max_batched_tokens=int(rng.choice([1024, 4096])),
        slo_aware=bool(rng.random() < 0.7),
        reference_aware=bool(rng.random() < 0.7),
        bucket_edges=tuple(sorted(int(x) for x in edges)),
    )
    sched = Scheduler(cache, P, SloConfig(ttft=float(rng.uniform(0.3, 2.0)), tpot=0.05), cfg)
    docs = [tuple(int(x) for x in rng.integers(0, 10**6, size=int(rng.integers(16, 1500)))) for _ in range(3)]
    now = 0.0
    next_id = 0

    def new(kind):
        nonlocal next_id
        base = docs[int(rng.integers(3))]
        cut = int(rng.integers(0, len(base) + 1))
        tail = tuple(int(x) for x in rng.integers(10**6, 2 * 10**6, size=int(rng.integers(1, 300))))
        r = make_request(next_id, base[:cut] + tail, kind, out=int(rng.integers(1, 8)), arrival=now)
        next_id += 1
        return r

    for _ in range(int(rng.integers(0, 30))):
        if rng.random() < 0.3:
            sched.add_online(new("online"))
        if rng.random() < 0.4 and len(sched.pool) < max_pool:
            sched.add_offline(new("offline"))
        if sched.pending():
            plan = sched.build(now)
            now += max(plan.est_time, 1e-3)
            sched.complete(plan, now)
    if rng.random() < 0.5:
        cache.set_threshold(int(rng.integers(0, cap_blocks + 1)) * BS)
    target = int(rng.integers(1, max_pool + 1))
    while len(sched.pool) < target:
        sched.add_offline(new("offline"))
    if rng.random() < 0.5:
        sched.add_online(new("online"))
    now += float(rng.uniform(0, 0.1))
    return sched, now


def check_state(seed, max_pool=6, rel=1e-9):
    """Compare the greedy's moves with the oracle; None if the state has no offline phase."""
    sched, now = random_state(seed, max_pool)
    ctx = sched.prepare(now)
    if ctx.online_only:
        return None
    snap = copy.deepcopy((sched, ctx))
    probe = copy.deepcopy(snap)
    cand_ids = sorted(c.request.id for c in probe[0].candidates(probe[1]))
    if len(cand_ids) > max_pool:
        return None
    adj = sched.adjust(ctx)
    cfg = snap[0].config
    problems = []
    chosen = []
    cur = score(snap, [])[0]
    for k in range(len(adj.moves) + 1):
        scores = {}
        for rid in cand_ids:
            if rid not in chosen:
                res = score(snap, chosen + [rid])
                if res is not None:
                    scores[rid] = res
        best = max(scores, key=lambda i: (scores[i][0], -i)) if scores else None
        if k == len(adj.moves):
            capped = k >= cfg.max_moves or len(snap[0].running) + k >= cfg.max_batch_requests
            if best is not None and not capped and scores[best][0] > cur * (1 + rel) + 1e-12:
                problems.append(("stopped with an improving move", k, best, scores[best][0], cur))
            break
        mv = adj.moves[k]
        got = scores.get(mv.request_id)
        if best is None or got is None:
            problems.append(("move not feasible for the oracle", k, mv))
            break
        if mv.request_id != best:
            # only rounding-level near ties may go either way
            if scores[best][0] == got[0] or not math.isclose(scores[best][0], got[0], rel_tol=rel):
                problems.append(("not the argmax", k, mv, best, scores[best]))
        if not math.isclose(mv.reward, got[0], rel_tol=rel):
            problems.append(("reward differs", k, mv, got))
        if got[1] != mv.end:
            problems.append(("step end differs", k, mv, got))
        if not mv.reward > cur:
            problems.append(("not an improvement", k, mv, cur))
        chosen.append(mv.request_id)
        cur = mv.reward
    return problems, len(adj.moves), len(cand_ids)
