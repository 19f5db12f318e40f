import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridserve.predictor import (
    InsufficientHistory,
    MemoryPredictor,
    OrderingError,
    PredictorConfig,
    bound_from_series,
    threshold_from_forecast,
)


def test_needs_two_observations():
    p = MemoryPredictor(window_s=10)
    with pytest.raises(InsufficientHistory):
        p.forecast(0.0)
    p.observe(0.0, 5)
    with pytest.raises(InsufficientHistory):
        p.forecast(0.0)


def test_mean_std_and_bound():
    p = MemoryPredictor(window_s=100, k=2.0)
    for i, v in enumerate([10, 20, 30, 40]):
        p.observe(float(i), v)
    fc = p.forecast(3.0)
    assert fc.mu == pytest.approx(25)
    assert fc.sigma == pytest.approx(np.std([10, 20, 30, 40], ddof=1))
    assert fc.bound == pytest.approx(fc.mu + 2 * fc.sigma)


def test_window_drops_old_observations():
    p = MemoryPredictor(window_s=5)
    p.observe(0.0, 1000)
    for t in range(1, 8):
        p.observe(float(t), 10)
    fc = p.forecast(7.0)
    assert fc.mu == 10 and fc.sigma == 0
    assert len(p) == 5


def test_out_of_order_and_negative_rejected():
    p = MemoryPredictor()
    p.observe(5.0, 1)
    with pytest.raises(OrderingError):
        p.observe(4.0, 1)
    with pytest.raises(ValueError):
        p.observe(6.0, -1)
    with pytest.raises(ValueError):
        MemoryPredictor(window_s=0)


def test_threshold_clamped():
    p = MemoryPredictor(window_s=100)
    p.observe(0, 100)
    p.observe(1, 300)
    fc = p.forecast(1)
    assert threshold_from_forecast(fc, 1000) == math.floor(1000 - fc.bound)
    p2 = MemoryPredictor(window_s=100)
    p2.observe(0, 5000)
    p2.observe(1, 9000)
    assert threshold_from_forecast(p2.forecast(1), 1000) == 0
    with pytest.raises(ValueError):
        threshold_from_forecast(fc, -1)


def test_config_validation():
    PredictorConfig().validate()
    with pytest.raises(ValueError):
        PredictorConfig(k=-1).validate()
    with pytest.raises(ValueError):
        PredictorConfig(window_s=0).validate()
    p = MemoryPredictor.from_config(PredictorConfig(window_s=30, k=3, horizon_s=10))
    assert (p.window, p.k, p.horizon) == (30, 3, 10)


def test_constant_series_has_zero_sigma():
    p = MemoryPredictor(window_s=1e6)
    for t in range(500):
        p.observe(float(t), 123456789)
    assert p.forecast(499.0).sigma == 0


def test_bound_from_series():
    fc = bound_from_series([1, 2, 3], k=1.0)
    assert fc.mu == 2 and fc.sigma == pytest.approx(1.0) and fc.bound == pytest.approx(3.0)
    with pytest.raises(InsufficientHistory):
        bound_from_series([1])


@settings(max_examples=50, deadline=None)
@given(
    values=st.lists(st.integers(0, 10**6), min_size=2, max_size=60),
    window=st.floats(1.0, 30.0),
)
def test_running_sums_match_direct_computation(values, window):
    p = MemoryPredictor(window_s=window)
    for t, v in enumerate(values):
        p.observe(float(t), v)
    now = float(len(values) - 1)
    inside = [v for t, v in enumerate(values) if t > now - window]
    if len(inside) < 2:
        with pytest.raises(InsufficientHistory):
            p.forecast(now)
        return
    fc = p.forecast(now)
    assert fc.mu == pytest.approx(np.mean(inside), rel=1e-9, abs=1e-6)
    assert fc.sigma == pytest.approx(np.std(inside, ddof=1), rel=1e-6, abs=1e-3)
