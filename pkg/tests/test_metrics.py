import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcasim import metrics
from mcasim.counters import EventCounters


def test_accuracy_all_correct_and_indices():
    y = np.arange(10) % 10
    assert metrics.accuracy(np.eye(10), y) == 1.0
    assert metrics.accuracy(y, y) == 1.0


def test_accuracy_constant_prediction_is_near_chance():
    y = np.random.default_rng(0).integers(0, 10, 10000)
    acc = metrics.accuracy(np.zeros(10000, dtype=int), y)
    assert abs(acc - 0.1) < 4 * math.sqrt(0.09 / 10000)


def test_accuracy_errors():
    with pytest.raises(metrics.MetricError):
        metrics.accuracy(np.zeros((0, 10)), np.zeros(0))
    with pytest.raises(metrics.MetricError):
        metrics.accuracy(np.zeros(3), np.zeros(4))


def test_bpc_perfect_and_uniform():
    assert metrics.bpc(np.eye(5), np.arange(5)) == 0.0
    p = np.full((7, 50), 1 / 50)
    assert metrics.bpc(p, np.arange(7) % 50) == pytest.approx(math.log2(50), rel=1e-12)
    assert metrics.bpc(np.eye(3), np.eye(3)) == 0.0


def test_bpc_errors():
    with pytest.raises(metrics.MetricError, match="step 1"):
        metrics.bpc(np.array([[1.0, 0.0], [1.0, 0.0]]), [0, 1])
    with pytest.raises(metrics.MetricError):
        metrics.bpc(np.array([[0.5, 0.6]]), [0])


@settings(max_examples=30)
@given(st.integers(0, 10 ** 6))
def test_bpc_is_mean_over_steps(seed):
    g = np.random.default_rng(seed)
    p = g.random((12, 6)) + 0.01
    p /= p.sum(axis=1, keepdims=True)
    t = g.integers(0, 6, 12)
    whole = metrics.bpc(p, t)
    parts = (metrics.bpc(p[:5], t[:5]) * 5 + metrics.bpc(p[5:], t[5:]) * 7) / 12
    assert whole == pytest.approx(parts, rel=1e-12)


def test_fd_identical_is_zero():
    a = np.random.default_rng(0).normal(size=(200, 4))
    assert abs(metrics.frechet_distance(a, a)) < 1e-8


def test_fd_scalar_closed_form():
    a = np.array([0.0, 2.0])  # mean 1, var 2
    b = np.array([1.0, 5.0])  # mean 3, var 8
    # (1-3)^2 + 2 + 8 - 2*sqrt(16) = 6
    assert metrics.frechet_distance(a, b) == pytest.approx(6.0, abs=1e-8)
    assert metrics.frechet_distance([0.0, 2.0], [2.0, 4.0]) == pytest.approx(4.0, abs=1e-8)


def test_fd_diagonal_exact_construction():
    # rows chosen so each covariance is exactly diagonal
    a = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]])
    b = a * [3.0, 0.5] + [1.0, -1.0]
    va, vb = np.array([2 / 3, 8 / 3]), np.array([6.0, 2 / 3])
    expect = 1.0 + 1.0 + np.sum(va + vb - 2 * np.sqrt(va * vb))
    assert metrics.frechet_distance(a, b) == pytest.approx(expect, abs=1e-8)


def test_fd_errors():
    with pytest.raises(metrics.MetricError):
        metrics.frechet_distance(np.zeros((5, 2)), np.zeros((5, 3)))
    with pytest.raises(metrics.MetricError):
        metrics.frechet_distance(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(metrics.MetricError):
        metrics.frechet_distance([np.nan, 1.0], [1.0, 2.0])


def test_cost_report():
    c = EventCounters(set_pulses=1)
    assert metrics.cost_report(c, metrics.UnitCosts())["total"] == 0.0
    rep = metrics.cost_report(c, metrics.UnitCosts(set_pulse=2.5, device_read=1.0))
    assert rep["set_pulses"] == 2.5 and rep["total"] == 2.5
    rep = metrics.cost_report(EventCounters(1, 2, 3, 4, 5), metrics.UnitCosts(1, 10, 100, 1000, 10000))
    assert rep["total"] == 1 + 20 + 300 + 4000 + 50000
    with pytest.raises(metrics.MetricError):
        metrics.UnitCosts(chi_write=-1.0)


def test_counters_arithmetic():
    a = EventCounters(1, 2, 3, 4, 5)
    assert (a + a - a) == a and a.device_updates == 3
    assert EventCounters.from_dict(a.as_dict()) == a
