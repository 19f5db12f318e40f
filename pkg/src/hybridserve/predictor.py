"""Sliding-window forecast of online KV demand used to size the burst reserve."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass


class InsufficientHistory(ValueError):
    pass


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryObservation:
    timestamp: float
    online_kv_tokens: int


@dataclass(frozen=True)
class MemoryForecast:
    mu: float
    sigma: float
    bound: float
    k: float
    window: float
    horizon: float


@dataclass
class PredictorConfig:
    window_s: float = 900.0
    horizon_s: float = 300.0
    k: float = 2.0
    default_reserve_tokens: int = 0
    min_interval_s: float = 1.0  # decimation of observations

    def validate(self) -> None:
        if self.window_s <= 0 or self.horizon_s <= 0:
            raise ValueError("window_s and horizon_s must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.default_reserve_tokens < 0 or self.min_interval_s < 0:
            raise ValueError("reserve and interval must be non-negative")


class MemoryPredictor:
    """Keeps observations in ``(now - window, now]`` with running sums."""

    def __init__(self, window_s: float = 900.0, k: float = 2.0, horizon_s: float = 300.0):
        if window_s <= 0:
            raise ValueError("window must be positive")
        self.window = float(window_s)
        self.k = float(k)
        self.horizon = float(horizon_s)
        self._obs = deque()
        self._sum = 0.0
        self._sumsq = 0.0
        self._last = -math.inf

    @classmethod
    def from_config(cls, cfg: PredictorConfig) -> "MemoryPredictor":
        return cls(cfg.window_s, cfg.k, cfg.horizon_s)

    def __len__(self) -> int:
        return len(self._obs)

    @property
    def last_ts(self) -> float:
        return self._last

    def observations(self) -> list:
        return [MemoryObservation(t, v) for t, v in self._obs]

    def _drop_before(self, now: float) -> None:
        cutoff = now - self.window
        obs = self._obs
        while obs and obs[0][0] <= cutoff:
            _, v = obs.popleft()
            self._sum -= v
            self._sumsq -= v * v
        if not obs:
            self._sum = self._sumsq = 0.0

    def observe(self, ts: float, online_kv_tokens: int) -> None:
        if ts < self._last:
            raise OrderingError(f"observation at {ts} precedes last one at {self._last}")
        if online_kv_tokens < 0:
            raise ValueError("token count must be non-negative")
        self._last = ts
        v = float(online_kv_tokens)
        self._obs.append((ts, v))
        self._sum += v
        self._sumsq += v * v
        self._drop_before(ts)

    def forecast(self, now: float) -> MemoryForecast:
        self._drop_before(now)
        vals = [v for t, v in self._obs if t <= now]
        n = len(vals)
        if n < 2:
            raise InsufficientHistory(f"{n} observations in window, need 2")
        if n == len(self._obs):
            mu = self._sum / n
            var = max(self._sumsq - n * mu * mu, 0.0) / (n - 1)
            # running sums lose precision on near-constant series; fall back
            if var < 1e-9 * max(mu * mu, 1.0):
                var = _variance(vals, mu)
        else:
            mu = sum(vals) / n
            var = _variance(vals, mu)
        sigma = math.sqrt(var)
        return MemoryForecast(mu, sigma, mu + self.k * sigma, self.k, self.window, self.horizon)


def _variance(vals, mu) -> float:
    return sum((v - mu) ** 2 for v in vals) / (len(vals) - 1)


def threshold_from_forecast(forecast: MemoryForecast, capacity_tokens: int) -> int:
    if capacity_tokens < 0:
        raise ValueError("capacity must be non-negative")
    t = capacity_tokens - forecast.bound
    return int(min(max(math.floor(t), 0), capacity_tokens))


def bound_from_series(values, k: float = 2.0) -> MemoryForecast:
    """Forecast directly from a value series (used for arrival-rate reports)."""
    vals = [float(v) for v in values]
    if len(vals) < 2:
        raise InsufficientHistory(f"{len(vals)} observations, need 2")
    mu = sum(vals) / len(vals)
    sigma = math.sqrt(_variance(vals, mu))
    return MemoryForecast(mu, sigma, mu + k * sigma, k, math.nan, math.nan)
