"""Execution-time model for batches of prefill and decode work, and its calibration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import nnls


class CalibrationError(ValueError):
    """Raised when profile samples cannot identify the model."""


@dataclass(frozen=True)
class CostModelParams:
    alpha: float = 1e-9  # s / token^2
    beta: float = 6e-5  # s / token
    c: float = 8e-3  # s, prefill floor
    gamma: float = 1e-6  # s / token, max-pooled context
    delta: float = 2e-6  # s / token, mean-pooled context
    lam: float = 0.9  # blend between max and min component

    def __post_init__(self):
        for name in ("alpha", "beta", "c", "gamma", "delta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def scaled(self, speed: float) -> "CostModelParams":
        """Params of hardware ``speed`` times faster (all times divided)."""
        if speed <= 0:
            raise ValueError("speed must be positive")
        return CostModelParams(
            self.alpha / speed,
            self.beta / speed,
            self.c / speed,
            self.gamma / speed,
            self.delta / speed,
            self.lam,
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "CostModelParams":
        obj = dict(obj)
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        unknown = set(obj) - {"alpha", "beta", "c", "gamma", "delta", "lam"}
        if unknown:
            raise ValueError(f"unknown cost model keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in obj.items()})


def prefill_time(start: int, end: int, params: CostModelParams) -> float:
    """Time to extend a prefill from ``start`` to ``end`` tokens of context.

    The chunk pays the marginal quadratic cost, so summing chunks gives the
    monolithic cost whenever no chunk sits on the floor.
    """
    if not 0 <= start < end:
        raise ValueError(f"invalid prefill span [{start}, {end})")
    t = params.alpha * (end * end - start * start) + params.beta * (end - start)
    return max(t, params.c)


def decode_time(lengths: Sequence[int], params: CostModelParams) -> float:
    if len(lengths) == 0:
        raise ValueError("decode batch is empty")
    mx = max(lengths)
    if min(lengths) < 1:
        raise ValueError("context lengths must be >= 1")
    return params.gamma * mx + params.delta * (sum(lengths) / len(lengths))


def batch_time(prefill: float, decode: float, params: CostModelParams) -> float:
    """Blend the two components; a missing component contributes nothing."""
    if prefill < 0 or decode < 0:
        raise ValueError("time components must be non-negative")
    if prefill == 0:
        return decode
    if decode == 0:
        return prefill
    hi, lo = (prefill, decode) if prefill >= decode else (decode, prefill)
    return params.lam * hi + (1 - params.lam) * lo


def components(
    spans: Iterable[tuple], decode_lens: Sequence[int], params: CostModelParams
) -> tuple:
    p = sum(prefill_time(s, e, params) for s, e in spans)
    d = decode_time(decode_lens, params) if len(decode_lens) else 0.0
    return p, d


def batch_components_time(
    spans: Iterable[tuple], decode_lens: Sequence[int], params: CostModelParams
) -> float:
    p, d = components(spans, decode_lens, params)
    return batch_time(p, d, params)


def estimate_plan_time(plan, params: CostModelParams) -> float:
    """Modeled time of a batch plan.

    ``plan`` exposes ``prefill_spans()`` (chunk ranges past any cache hit)
    and ``decode_lens()`` (context length of each decoding request).
    """
    spans = list(plan.prefill_spans())
    for s, e in spans:
        if not 0 <= s < e:
            raise ValueError(f"invalid plan: prefill span [{s}, {e})")
    lens = list(plan.decode_lens())
    if not spans and not lens:
        return 0.0
    return batch_components_time(spans, lens, params)


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class ProfileSample:
    prefill_spans: tuple
    decode_lens: tuple
    time_s: float

    def __post_init__(self):
        if not self.time_s > 0:
            raise ValueError("measured time must be positive")

    @property
    def regime(self) -> str:
        if self.prefill_spans and self.decode_lens:
            return "mixed"
        if self.prefill_spans:
            return "prefill"
        if self.decode_lens:
            return "decode"
        return "empty"

    def to_record(self) -> dict:
        return {
            "prefill_spans": [list(s) for s in self.prefill_spans],
            "decode_lens": list(self.decode_lens),
            "time_s": self.time_s,
        }

    @classmethod
    def from_record(cls, obj: dict) -> "ProfileSample":
        return cls(
            prefill_spans=tuple((int(s), int(e)) for s, e in obj.get("prefill_spans", [])),
            decode_lens=tuple(int(x) for x in obj.get("decode_lens", [])),
            time_s=float(obj["time_s"]),
        )


def load_profile(text: str) -> list:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(ProfileSample.from_record(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise CalibrationError(f"profile line {lineno}: {exc}") from None
    return out


def _span_features(spans) -> tuple:
    q = sum(e * e - s * s for s, e in spans)
    lin = sum(e - s for s, e in spans)
    return q, lin


def _fit_prefill(samples: list) -> tuple:
    # Single-span samples identify the floor directly; multi-span samples are
    # only used for the regression when each span is clearly above the floor.
    feats = np.array([_span_features(s.prefill_spans) for s in samples], dtype=float)
    nspan = np.array([len(s.prefill_spans) for s in samples], dtype=float)
    y = np.array([s.time_s for s in samples], dtype=float)
    per_span = y / nspan
    # normalise columns so nnls is well conditioned
    scale = feats.max(axis=0)
    scale[scale == 0] = 1.0

    def fit_above(mask):
        if mask.sum() < 2:
            return None
        A = feats[mask] / scale
        if np.linalg.matrix_rank(A) < 2:
            return None
        w = y[mask]
        # relative (weighted) least squares: residuals measured as fractions
        coef, _ = nnls(A / w[:, None], np.ones_like(w))
        return coef / scale

    def predict(coef, c):
        out = np.empty(len(samples))
        for i, s in enumerate(samples):
            out[i] = sum(max(coef[0] * (e * e - b * b) + coef[1] * (e - b), c) for b, e in s.prefill_spans)
        return out

    candidates = np.unique(np.concatenate([[0.0], np.sort(per_span)]))
    best = None
    for c in candidates:
        coef = fit_above(per_span > c * (1 + 1e-9))
        if coef is None:
            continue
        pred = predict(coef, c)
        err = float(np.sum(((pred - y) / y) ** 2))
        if best is None or err < best[0] - 1e-15:
            best = (err, c, coef)
    if best is None:
        raise CalibrationError(
            "prefill regime rank-deficient: need >= 2 distinct super-floor prefill lengths"
        )
    _, c, coef = best
    # refine the floor from samples predicted to sit on it
    lin = feats @ coef
    floor_mask = (nspan == 1) & (lin <= c)
    if floor_mask.any():
        c = float(np.mean(y[floor_mask]))
        coef2 = fit_above(lin > c)
        if coef2 is not None:
            coef = coef2
    return float(coef[0]), float(coef[1]), float(c)


def _fit_decode(samples: list) -> tuple:
    A = np.array(
        [[max(s.decode_lens), float(np.mean(s.decode_lens))] for s in samples], dtype=float
    )
    y = np.array([s.time_s for s in samples])
    if np.linalg.matrix_rank(A / A.max(axis=0)) < 2:
        raise CalibrationError(
            "decode regime rank-deficient: need batches where max(L) differs from mean(L)"
        )
    scale = A.max(axis=0)
    coef, _ = nnls((A / scale) / y[:, None], np.ones_like(y))
    coef = coef / scale
    return float(coef[0]), float(coef[1])


def _fit_lambda(samples: list, partial: CostModelParams) -> float:
    num = den = 0.0
    for s in samples:
        p, d = components(s.prefill_spans, s.decode_lens, partial)
        hi, lo = max(p, d), min(p, d)
        w = 1.0 / s.time_s**2
        num += w * (s.time_s - lo) * (hi - lo)
        den += w * (hi - lo) ** 2
    if den <= 0:
        raise CalibrationError("mixed regime degenerate: prefill and decode parts coincide")
    return num / den


def calibrate(samples: Sequence[ProfileSample]) -> CostModelParams:
    """Fit all six coefficients from profile samples.

    Stages: prefill floor and (alpha, beta) from pure-prefill samples,
    (gamma, delta) from pure-decode samples, then lambda from mixed samples
    by a closed-form one-dimensional least squares.  Residuals are relative,
    so short and long batches weigh alike.
    """
    samples = list(samples)
    if len(samples) < 12:
        raise CalibrationError(f"need at least 12 profile samples, got {len(samples)}")
    by = {"prefill": [], "decode": [], "mixed": []}
    for s in samples:
        if s.regime in by:
            by[s.regime].append(s)
    for regime, group in by.items():
        if not group:
            raise CalibrationError(f"missing {regime} samples")
    alpha, beta, c = _fit_prefill(by["prefill"])
    gamma, delta = _fit_decode(by["decode"])
    partial = CostModelParams(alpha, beta, c, gamma, delta, 1.0)
    lam = _fit_lambda(by["mixed"], partial)
    return CostModelParams(alpha, beta, c, gamma, delta, lam)


def residuals(samples: Sequence[ProfileSample], params: CostModelParams) -> dict:
    """Root-mean-square relative residual per regime."""
    acc: dict = {}
    for s in samples:
        pred = batch_components_time(s.prefill_spans, s.decode_lens, params)
        acc.setdefault(s.regime, []).append((pred - s.time_s) / s.time_s)
    return {k: float(np.sqrt(np.mean(np.square(v)))) for k, v in acc.items()}


def synthesize_profile(
    params: CostModelParams,
    rng: np.random.Generator,
    noise: float = 0.0,
    n_prefill: int = 24,
    n_decode: int = 24,
    n_mixed: int = 24,
    max_len: int = 32768,
) -> list:
    """Micro-benchmark stand-in: samples from ``params`` with multiplicative noise."""
    samples = []

    def jitter(t):
        if noise <= 0:
            return t
        return t * max(0.05, 1 + rng.normal(0, noise))

    # floor samples plus a log-spaced sweep of prompt lengths
    lengths = [1, 2, 4, 8] + list(
        np.unique(np.geomspace(64, max_len, n_prefill - 4).astype(int))
    )
    for n in lengths:
        spans = ((0, int(n)),)
        samples.append(ProfileSample(spans, (), jitter(prefill_time(0, int(n), params))))
    def decode_batch():
        # one long sequence plus shorter ones so max and mean vary independently
        longest = int(np.exp(rng.uniform(np.log(64), np.log(max_len))))
        frac = rng.uniform(0.02, 1.0)
        bs = int(rng.integers(2, 64))
        rest = rng.integers(1, max(2, int(2 * frac * longest)), size=bs - 1)
        return (longest,) + tuple(int(min(x, longest)) for x in rest)

    for _ in range(n_decode):
        lens = decode_batch()
        samples.append(ProfileSample((), lens, jitter(decode_time(lens, params))))
    for _ in range(n_mixed):
        n = int(rng.integers(512, max_len))
        start = int(rng.integers(0, n - 256))
        lens = decode_batch()
        t = batch_time(prefill_time(start, n, params), decode_time(lens, params), params)
        samples.append(ProfileSample(((start, n),), lens, jitter(t)))
    return samples


def random_params(rng: np.random.Generator) -> CostModelParams:
    """Positive, well-scaled ground truth used by round-trip checks."""
    beta = float(10 ** rng.uniform(-5, -3.5))
    # quadratic and linear terms cross inside the profiled length range
    crossover = float(10 ** rng.uniform(np.log10(4096), np.log10(32768)))
    gamma = float(10 ** rng.uniform(-7.5, -6))
    return CostModelParams(
        alpha=beta / crossover,
        beta=beta,
        c=float(beta * 10 ** rng.uniform(1.5, 2.5)),
        gamma=gamma,
        delta=gamma * float(10 ** rng.uniform(-0.5, 0.5)),
        lam=float(rng.uniform(0.55, 0.95)),
    )
