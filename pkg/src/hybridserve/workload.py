"""Requests, trace files and synthetic workload generation.

Prompts are plain token-ID sequences.  Requests that belong to a sharing
group draw their leading tokens from a per-group stream, so prefix identity
is preserved without a tokenizer.
"""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

VOCAB_SIZE = 32000
# Group streams start with a marker token outside the vocabulary so that the
# first token always differs across groups.
GROUP_MARKER_BASE = 1_000_000
_GROUP_DOMAIN = 0x6A09
_UNIQUE_DOMAIN = 0xBB67


class TraceError(ValueError):
    """Raised for malformed or invalid trace files."""


class GenerationError(ValueError):
    """Raised when a synthetic workload spec cannot be realised."""


class RequestKind(enum.Enum):
    ONLINE = "online"
    OFFLINE = "offline"


class RequestState(enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    PREEMPTED = "preempted"
    FINISHED = "finished"


def output_token_id(request_id: int, index: int) -> int:
    """Synthetic ID of a generated token; negative so it never hits a prompt."""
    return -(1 + (request_id << 24) + index)


@dataclass(eq=False)
class Request:
    """One inference job.

    ``num_computed`` counts tokens of ``prompt + outputs`` whose KV has been
    computed for the current residency of the request.  A decode step is the
    special case of processing exactly one pending token past the prompt.
    """

    id: int
    kind: RequestKind
    arrival_time: float
    prompt: tuple
    target_output_len: int
    group: Optional[int] = None
    num_computed: int = 0
    outputs: list = field(default_factory=list)
    first_token_time: Optional[float] = None
    per_token_times: list = field(default_factory=list)
    state: RequestState = RequestState.WAITING
    # accounting used by metrics
    cold_tokens: int = 0
    hit_tokens: int = 0
    recompute_tokens: int = 0
    finish_time: Optional[float] = None

    def __post_init__(self):
        if len(self.prompt) < 1:
            raise ValueError("prompt length must be >= 1")
        if self.target_output_len < 1:
            raise ValueError("target_output_len must be >= 1")

    @property
    def is_online(self) -> bool:
        return self.kind is RequestKind.ONLINE

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    @property
    def decode_done(self) -> int:
        return len(self.outputs)

    @property
    def prefill_done(self) -> int:
        return min(self.num_computed, len(self.prompt))

    @property
    def seq_len(self) -> int:
        """Known tokens: prompt plus every emitted output token."""
        return len(self.prompt) + len(self.outputs)

    @property
    def finished(self) -> bool:
        return len(self.outputs) >= self.target_output_len

    @property
    def in_decode(self) -> bool:
        """True when the only pending token is the last generated one."""
        return bool(self.outputs) and self.num_computed == self.seq_len - 1

    def tokens(self) -> tuple:
        if not self.outputs:
            return self.prompt
        return self.prompt + tuple(self.outputs)

    def waiting_time(self, now: float) -> float:
        return now - self.arrival_time

    def emit_token(self, now: float) -> None:
        self.outputs.append(output_token_id(self.id, len(self.outputs)))
        if self.first_token_time is None:
            self.first_token_time = now
        self.per_token_times.append(now)
        if self.finished:
            self.state = RequestState.FINISHED
            self.finish_time = now

    @property
    def ttft(self) -> Optional[float]:
        if self.first_token_time is None:
            return None
        return self.first_token_time - self.arrival_time

    @property
    def mean_tpot(self) -> Optional[float]:
        if len(self.per_token_times) < 2:
            return None if not self.per_token_times else 0.0
        return (self.per_token_times[-1] - self.per_token_times[0]) / (
            len(self.per_token_times) - 1
        )


@dataclass(frozen=True)
class TraceEvent:
    """One trace record.

    ``shared_len`` is the number of leading prompt tokens drawn from the
    group stream when ``prompt_ids`` is absent; ``None`` means the whole
    prompt comes from the group stream.
    """

    ts: float
    kind: RequestKind
    prompt_len: int
    output_len: int
    group: Optional[int] = None
    prompt_ids: Optional[tuple] = None
    shared_len: Optional[int] = None

    def to_record(self) -> dict:
        rec = {
            "ts": self.ts,
            "kind": self.kind.value,
            "prompt_len": self.prompt_len,
            "output_len": self.output_len,
            "group": self.group,
            "prompt_ids": list(self.prompt_ids) if self.prompt_ids is not None else None,
        }
        if self.shared_len is not None:
            rec["shared_len"] = self.shared_len
        return rec


def _stream(domain: int, key: int, length: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([domain, key]))
    return rng.integers(0, VOCAB_SIZE, size=length)


def group_tokens(group: int, length: int) -> tuple:
    """Deterministic token stream of a sharing group."""
    body = _stream(_GROUP_DOMAIN, group, max(length - 1, 0))
    return (GROUP_MARKER_BASE + group,) + tuple(int(t) for t in body)


def materialize_prompt(event: TraceEvent, uid: int) -> tuple:
    """Prompt token IDs for ``event``; ``uid`` seeds the non-shared suffix."""
    if event.prompt_ids is not None:
        return tuple(int(t) for t in event.prompt_ids)
    kind_key = 0 if event.kind is RequestKind.ONLINE else 1
    if event.group is None:
        toks = _stream(_UNIQUE_DOMAIN, (uid << 1) | kind_key, event.prompt_len)
        return tuple(int(t) for t in toks)
    shared = event.prompt_len if event.shared_len is None else event.shared_len
    if shared > event.prompt_len:
        raise GenerationError(
            f"shared_len {shared} exceeds prompt_len {event.prompt_len}"
        )
    head = group_tokens(event.group, shared)
    tail = _stream(_UNIQUE_DOMAIN, (uid << 1) | kind_key, event.prompt_len - shared)
    return head + tuple(int(t) for t in tail)


def make_requests(events: Sequence[TraceEvent], first_id: int = 0) -> list:
    """Materialise trace events into fresh ``Request`` objects."""
    out = []
    for i, ev in enumerate(events):
        rid = first_id + i
        out.append(
            Request(
                id=rid,
                kind=ev.kind,
                arrival_time=ev.ts,
                prompt=materialize_prompt(ev, rid),
                target_output_len=ev.output_len,
                group=ev.group,
            )
        )
    return out


# --------------------------------------------------------------------------
# trace files


def _parse_record(obj, lineno: int) -> TraceEvent:
    if not isinstance(obj, dict):
        raise TraceError(f"line {lineno}: record must be a JSON object")
    try:
        ts = obj["ts"]
        kind = RequestKind(obj["kind"])
        prompt_ids = obj.get("prompt_ids")
        prompt_len = obj.get("prompt_len")
        output_len = obj["output_len"]
    except KeyError as exc:
        raise TraceError(f"line {lineno}: missing key {exc.args[0]!r}") from None
    except ValueError:
        raise TraceError(f"line {lineno}: kind must be 'online' or 'offline'") from None
    if isinstance(ts, bool) or not isinstance(ts, (int, float)) or not math.isfinite(ts):
        raise TraceError(f"line {lineno}: ts must be a finite number")
    if ts < 0:
        raise TraceError(f"line {lineno}: negative timestamp {ts}")
    if prompt_ids is not None:
        if not isinstance(prompt_ids, list) or not all(
            isinstance(t, int) and not isinstance(t, bool) for t in prompt_ids
        ):
            raise TraceError(f"line {lineno}: prompt_ids must be a list of ints")
        if prompt_len is None:
            prompt_len = len(prompt_ids)
        elif prompt_len != len(prompt_ids):
            raise TraceError(f"line {lineno}: prompt_len disagrees with prompt_ids")
        prompt_ids = tuple(prompt_ids)
    for name, val in (("prompt_len", prompt_len), ("output_len", output_len)):
        if isinstance(val, bool) or not isinstance(val, int) or val < 1:
            raise TraceError(f"line {lineno}: {name} must be a positive integer")
    group = obj.get("group")
    if group is not None and (isinstance(group, bool) or not isinstance(group, int)):
        raise TraceError(f"line {lineno}: group must be an integer or null")
    shared_len = obj.get("shared_len")
    if shared_len is not None:
        if isinstance(shared_len, bool) or not isinstance(shared_len, int) or shared_len < 0:
            raise TraceError(f"line {lineno}: shared_len must be a non-negative integer")
        if shared_len > prompt_len:
            raise TraceError(f"line {lineno}: shared_len exceeds prompt_len")
    return TraceEvent(
        ts=float(ts),
        kind=kind,
        prompt_len=prompt_len,
        output_len=output_len,
        group=group,
        prompt_ids=prompt_ids,
        shared_len=shared_len,
    )


def load_trace(source: Union[bytes, str, IO]) -> list:
    """Parse a JSON Lines trace.

    Blank lines are skipped.  Records must already be sorted by ``ts``.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, bytes) else data
    events = []
    last_ts = -math.inf
    for lineno, line in enumerate(io.StringIO(text), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TraceError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        ev = _parse_record(obj, lineno)
        if ev.ts < last_ts:
            raise TraceError(
                f"line {lineno}: timestamp {ev.ts} precedes previous {last_ts}"
            )
        last_ts = ev.ts
        events.append(ev)
    return events


def dump_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(json.dumps(ev.to_record(), separators=(",", ":")) + "\n" for ev in events)


def scale_trace(events: Sequence[TraceEvent], factor: float) -> list:
    """Multiply every timestamp by ``factor``; shape of the arrival process is kept."""
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    return [replace(ev, ts=ev.ts * factor) for ev in events]


def merge_traces(*traces: Sequence[TraceEvent]) -> list:
    merged = [ev for tr in traces for ev in tr]
    merged.sort(key=lambda ev: ev.ts)  # stable: ties keep input order
    return merged


# --------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class LengthDist:
    mean: float
    std: float
    min: int
    max: int

    def validate(self, name: str) -> None:
        if not (1 <= self.min <= self.max):
            raise ValueError(f"{name}: need 1 <= min <= max")
        if self.std < 0 or self.mean <= 0:
            raise ValueError(f"{name}: mean must be positive and std non-negative")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Truncated normal, rounded to integers, by rejection."""
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        if self.std == 0:
            val = int(round(min(max(self.mean, self.min), self.max)))
            return np.full(n, val, dtype=np.int64)
        out = np.empty(0, dtype=np.int64)
        while out.size < n:
            draw = np.rint(rng.normal(self.mean, self.std, size=2 * (n - out.size) + 8))
            draw = draw[(draw >= self.min) & (draw <= self.max)].astype(np.int64)
            out = np.concatenate([out, draw])
        return out[:n]


@dataclass(frozen=True)
class Sharing:
    group_count: int = 0
    shared_prefix_len: int = 0
    requests_per_group: int = 0


@dataclass(frozen=True)
class SyntheticWorkloadSpec:
    """Parameters of a synthetic trace.

    Online specs produce arrivals from an inhomogeneous Poisson process.
    Offline specs produce a batch submitted at ``t=0``: ``group_count *
    requests_per_group`` grouped requests plus ``count`` ungrouped ones, in
    a seeded shuffled submission order when ``shuffle`` is set.
    """

    kind: RequestKind = RequestKind.ONLINE
    duration: float = 600.0
    base_rate: float = 1.0
    tidal_amplitude: float = 0.0
    tidal_period: float = 86400.0
    tidal_phase: float = 0.0
    burst_rate_multiplier: float = 1.0
    burst_probability_per_window: float = 0.0
    burst_window: float = 60.0
    prompt_len: LengthDist = LengthDist(308, 150, 16, 2048)
    output_len: LengthDist = LengthDist(200, 100, 8, 512)
    sharing: Sharing = Sharing()
    count: int = 0
    shuffle: bool = True
    group_offset: int = 0
    seed: int = 0

    def validate(self) -> None:
        self.prompt_len.validate("prompt_len")
        self.output_len.validate("output_len")
        if self.kind is RequestKind.ONLINE:
            if self.duration <= 0 or self.base_rate <= 0:
                raise ValueError("duration and base_rate must be positive")
            if not 0 <= self.tidal_amplitude < 1:
                raise ValueError("tidal_amplitude must be in [0, 1)")
            if self.tidal_period <= 0 or self.burst_window <= 0:
                raise ValueError("tidal_period and burst_window must be positive")
            if self.burst_rate_multiplier < 1:
                raise ValueError("burst_rate_multiplier must be >= 1")
            if not 0 <= self.burst_probability_per_window <= 1:
                raise ValueError("burst_probability_per_window must be in [0, 1]")
        sh = self.sharing
        if sh.group_count < 0 or sh.requests_per_group < 0 or sh.shared_prefix_len < 0:
            raise ValueError("sharing fields must be non-negative")
        if sh.group_count > 0:
            if sh.requests_per_group < 1 or sh.shared_prefix_len < 1:
                raise ValueError("sharing groups need requests_per_group and prefix >= 1")
            if sh.shared_prefix_len > self.prompt_len.min:
                raise GenerationError(
                    f"shared_prefix_len {sh.shared_prefix_len} exceeds minimum prompt "
                    f"length {self.prompt_len.min}"
                )
        if self.count < 0:
            raise ValueError("count must be non-negative")

    def rate(self, t: np.ndarray | float, bursts: Optional[np.ndarray] = None):
        r = self.base_rate * (
            1.0
            + self.tidal_amplitude
            * np.sin(2 * np.pi * (np.asarray(t) / self.tidal_period) + self.tidal_phase)
        )
        if bursts is not None:
            idx = np.minimum((np.asarray(t) // self.burst_window).astype(np.int64), len(bursts) - 1)
            r = r * np.where(bursts[idx], self.burst_rate_multiplier, 1.0)
        return r


def _arrival_times(spec: SyntheticWorkloadSpec, rng: np.random.Generator) -> np.ndarray:
    n_windows = max(1, math.ceil(spec.duration / spec.burst_window))
    bursts = rng.random(n_windows) < spec.burst_probability_per_window
    rate_max = spec.base_rate * (1 + spec.tidal_amplitude) * spec.burst_rate_multiplier
    # thinning: homogeneous candidates at rate_max, keep with prob rate(t)/rate_max
    times = []
    t = 0.0
    block = max(16, int(rate_max * spec.duration * 1.1) + 16)
    while True:
        gaps = rng.exponential(1.0 / rate_max, size=block)
        cand = t + np.cumsum(gaps)
        u = rng.random(block)
        t = float(cand[-1])
        inside = cand < spec.duration
        keep = inside & (u * rate_max < spec.rate(cand, bursts))
        times.append(cand[keep])
        if not inside.all():
            break
    return np.concatenate(times) if times else np.zeros(0)


def generate_synthetic(spec: SyntheticWorkloadSpec) -> list:
    """Generate a trace from ``spec``; identical spec and seed give identical events."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sh = spec.sharing
    if spec.kind is RequestKind.ONLINE:
        ts = _arrival_times(spec, rng)
        n = len(ts)
    else:
        n = sh.group_count * sh.requests_per_group + spec.count
        ts = np.zeros(n)
    plens = spec.prompt_len.sample(rng, n)
    olens = spec.output_len.sample(rng, n)
    groups: list = [None] * n
    shared: list = [None] * n
    n_grouped = sh.group_count * sh.requests_per_group
    if spec.kind is RequestKind.ONLINE and sh.group_count > 0:
        # online requests join groups round-robin
        for i in range(n):
            groups[i] = spec.group_offset + i % sh.group_count
            shared[i] = sh.shared_prefix_len
    else:
        for i in range(n_grouped):
            groups[i] = spec.group_offset + i // sh.requests_per_group
            shared[i] = sh.shared_prefix_len
    order = np.arange(n)
    if spec.kind is RequestKind.OFFLINE and spec.shuffle and n > 1:
        order = rng.permutation(n)
    events = []
    for j in order:
        if shared[j] is not None and shared[j] > plens[j]:
            raise GenerationError(
                f"shared prefix {shared[j]} longer than sampled prompt {plens[j]}"
            )
        events.append(
            TraceEvent(
                ts=float(ts[j]),
                kind=spec.kind,
                prompt_len=int(plens[j]),
                output_len=int(olens[j]),
                group=groups[j],
                shared_len=shared[j],
            )
        )
    if spec.kind is RequestKind.ONLINE:
        events.sort(key=lambda e: e.ts)
    return events


def share_rate(prompts: Sequence[Sequence[int]]) -> float:
    """Fraction of prompt tokens that are a common prefix with some other prompt."""
    prompts = [tuple(p) for p in prompts]
    total = sum(len(p) for p in prompts)
    if total == 0:
        return 0.0
    # longest common prefix with any other prompt equals the LCP with one of
    # its neighbours in sorted order
    order = sorted(range(len(prompts)), key=lambda i: prompts[i])
    best = [0] * len(prompts)
    for a, b in zip(order, order[1:]):
        pa, pb = prompts[a], prompts[b]
        m = 0
        lim = min(len(pa), len(pb))
        while m < lim and pa[m] == pb[m]:
            m += 1
        best[a] = max(best[a], m)
        best[b] = max(best[b], m)
    return sum(best) / total


def summarize(events: Sequence[TraceEvent]) -> dict:
    """Summary statistics printed by the trace generator."""
    n = len(events)
    if n == 0:
        return {"count": 0, "rate": 0.0, "mean_prompt": 0.0, "share_rate": 0.0}
    span = events[-1].ts - events[0].ts
    prompts = [materialize_prompt(ev, i) for i, ev in enumerate(events)]
    return {
        "count": n,
        "rate": (n / span) if span > 0 else float("inf"),
        "mean_prompt": float(np.mean([ev.prompt_len for ev in events])),
        "mean_output": float(np.mean([ev.output_len for ev in events])),
        "share_rate": share_rate(prompts),
    }


# Presets matched on mean prompt length and prefix share rate.
PRESETS = {
    "sharegpt_like": SyntheticWorkloadSpec(
        kind=RequestKind.ONLINE,
        prompt_len=LengthDist(308, 150, 16, 2048),
        output_len=LengthDist(200, 100, 8, 512),
    ),
    "loogle_qa_short_like": SyntheticWorkloadSpec(
        kind=RequestKind.OFFLINE,
        prompt_len=LengthDist(23474, 400, 21377, 25600),
        output_len=LengthDist(48, 24, 4, 128),
        sharing=Sharing(group_count=20, shared_prefix_len=21361, requests_per_group=8),
    ),
    "loogle_qa_long_like": SyntheticWorkloadSpec(
        kind=RequestKind.OFFLINE,
        prompt_len=LengthDist(23474, 400, 21377, 25600),
        output_len=LengthDist(256, 96, 16, 768),
        sharing=Sharing(group_count=20, shared_prefix_len=21361, requests_per_group=8),
    ),
    "toolbench_like": SyntheticWorkloadSpec(
        kind=RequestKind.OFFLINE,
        prompt_len=LengthDist(1835, 120, 1576, 2300),
        output_len=LengthDist(128, 64, 8, 512),
        sharing=Sharing(group_count=20, shared_prefix_len=1560, requests_per_group=8),
    ),
}


def preset(name: str, **overrides) -> SyntheticWorkloadSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)
