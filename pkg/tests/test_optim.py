import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcasim import crossbar as cb
from mcasim import device as dev
from mcasim import optim


class IdealArray:
    """Stand-in array whose every pulse moves the weight by exactly one granularity."""

    def __init__(self, w, eps_p, eps_d):
        self.w = np.array(w, dtype=float)
        self.rows, self.cols = self.w.shape
        self.eps_p, self.eps_d = eps_p, eps_d
        self.log = []

    def program(self, rows, cols, pulses, t_now):
        for i, j, p in zip(rows, cols, pulses):
            self.w[i, j] += p * (self.eps_p if p > 0 else self.eps_d)
        self.log.append((np.array(rows), np.array(cols), np.array(pulses)))


def test_update_hand_example():
    u = optim.compute_update_lowprec([1.0, -0.5, 0.25], [0.9], 0.4, 3)
    i, j, v = u.entries()
    assert i.tolist() == [0, 1, 2] and j.tolist() == [0, 0, 0]
    assert np.allclose(v, [0.36, -0.24, 0.12], rtol=1e-12)
    assert u.s_x == pytest.approx(1 / 3) and u.s_delta == pytest.approx(0.3)


def test_update_zero_delta_is_empty():
    u = optim.compute_update_lowprec(np.ones(5), np.zeros(3), 0.1, 3)
    assert u.nnz == 0 and u.entries()[2].size == 0


def test_update_full_precision_matches_outer():
    g = np.random.default_rng(0)
    x, d = g.normal(size=7), g.normal(size=4)
    assert np.allclose(optim.compute_update_lowprec(x, d, 0.3, None).dense((7, 4)), 0.3 * np.outer(x, d),
                       rtol=1e-12, atol=0)


def test_update_errors():
    with pytest.raises(optim.OptimError):
        optim.compute_update_lowprec([1.0], [np.inf], 0.1)
    with pytest.raises(optim.OptimError):
        optim.compute_update_lowprec([1.0], [1.0], 0.0)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.lists(st.floats(-10, 10), min_size=1, max_size=8),
       st.integers(2, 8))
def test_update_entries_nonzero_and_add_to_matches_dense(x, d, bits):
    u = optim.compute_update_lowprec(x, d, 0.5, bits)
    v = u.entries()[2]
    assert np.all(v != 0)
    t = np.zeros((len(x), len(d)))
    u.add_to(t)
    assert np.allclose(t, u.dense(t.shape), rtol=1e-12, atol=0)


def test_momentum_plain_sgd():
    g = np.array([1.0, -2.0])
    v, step = optim.sgd_momentum_step(None, g, 0.1, 0.0)
    assert np.array_equal(step, -0.1 * g)


@given(st.floats(0, 0.95), st.integers(1, 30))
def test_momentum_geometric_series(mu, k):
    g = np.array([0.7, -1.3])
    v = None
    for _ in range(k):
        v, _ = optim.sgd_momentum_step(v, g, 0.1, mu)
    assert np.allclose(v, g * (1 - mu ** k) / (1 - mu), rtol=1e-12)


def test_momentum_errors():
    with pytest.raises(optim.OptimError):
        optim.sgd_momentum_step(None, [1.0], 0.1, 1.0)
    with pytest.raises(optim.OptimError):
        optim.sgd_momentum_step(np.zeros(2), np.zeros(3), 0.1, 0.5)


def test_accumulate_counts_writes():
    acc = optim.ChiAccumulator.zeros((3, 2), 0.096)
    assert optim.accumulate(acc, optim.compute_update_lowprec(np.zeros(3), [1.0, 1.0], 1.0)) == 0
    assert optim.accumulate(acc, optim.compute_update_lowprec([1, 0, 1], [1.0, 1.0], 1.0, None)) == 4


def test_two_small_updates_make_one_pulse():
    acc = optim.ChiAccumulator.zeros((1, 1), 0.096)
    for _ in range(2):
        optim.accumulate(acc, np.array([[0.05]]))
    ev = optim.pulses_due(acc)
    assert ev.pulses.tolist() == [1]
    assert acc.chi[0, 0] == pytest.approx(0.004)


def test_flush_examples():
    acc = optim.ChiAccumulator(np.array([[0.2, -1.2, 0.05]]), 0.096, 1.0)
    arr = IdealArray(np.zeros((1, 3)), 0.096, 1.0)
    ev = optim.flush(acc, arr, 1.0)
    assert ev.pulses.tolist() == [2, -1]
    assert acc.chi[0, 0] == pytest.approx(0.008)
    assert acc.chi[0, 1] == pytest.approx(-0.2)
    assert acc.chi[0, 2] == 0.05


def test_sub_granularity_leaves_array_untouched():
    a = cb.CrossbarArray(2, 2, "differential", dev.DeviceModelParams())
    acc = optim.ChiAccumulator(np.full((2, 2), 0.09), 0.096, 0.096)
    assert len(optim.flush(acc, a, 1.0)) == 0
    assert a.counters.set_pulses == 0


def test_flush_shape_mismatch():
    with pytest.raises(optim.OptimError):
        optim.flush(optim.ChiAccumulator.zeros((2, 2), 0.1), IdealArray(np.zeros((3, 2)), 0.1, 0.1), 0.0)


def test_flush_exact_multiple_respects_bound():
    acc = optim.ChiAccumulator(np.array([[0.096 * 2, -0.3]]), 0.096, 0.1)
    optim.pulses_due(acc)
    assert 0 <= acc.chi[0, 0] < 0.096 and -0.1 < acc.chi[0, 1] <= 0


def test_pulse_cap_keeps_row_dirty():
    acc = optim.ChiAccumulator(np.array([[0.5]]), 0.1, 0.1, pulse_cap=2)
    assert optim.pulses_due(acc).pulses.tolist() == [2]
    assert optim.pulses_due(acc).pulses.tolist() == [2]
    assert acc.chi[0, 0] == pytest.approx(0.1)


@given(st.integers(0, 10 ** 6))
@settings(max_examples=20)
def test_accumulation_order_independent(seed):
    g = np.random.default_rng(seed)
    ups = [np.round(g.normal(size=(3, 4)) * 64) / 64 for _ in range(6)]  # dyadic: exact sums
    a = optim.ChiAccumulator.zeros((3, 4), 0.1)
    b = optim.ChiAccumulator.zeros((3, 4), 0.1)
    for u in ups:
        optim.accumulate(a, u)
    for k in g.permutation(6):
        optim.accumulate(b, ups[k])
    assert np.array_equal(a.chi, b.chi)


def test_residual_bound_and_conservation_1e5_steps():
    g = np.random.default_rng(0)
    eps_p, eps_d = 0.096, 1.0
    acc = optim.ChiAccumulator.zeros((4, 5), eps_p, eps_d)
    for _ in range(100_000):
        u = g.normal(scale=g.choice([0.01, 0.3, 3.0]), size=(4, 5)) * (g.random((4, 5)) < 0.3)
        optim.accumulate(acc, u)
        before = acc.chi.copy()
        ev = optim.pulses_due(acc)
        assert np.all(acc.chi < eps_p) and np.all(acc.chi > -eps_d)
        moved = before - acc.chi
        expect = np.zeros_like(moved)
        pos = ev.pulses > 0
        expect[ev.rows[pos], ev.cols[pos]] = ev.pulses[pos] * eps_p
        expect[ev.rows[~pos], ev.cols[~pos]] = ev.pulses[~pos] * eps_d
        assert np.allclose(moved, expect, rtol=0, atol=1e-12)


@settings(max_examples=40)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 0.2), st.floats(0.01, 2.0))
def test_residual_bound_property(seed, eps_p, eps_d):
    g = np.random.default_rng(seed)
    acc = optim.ChiAccumulator.zeros((3, 3), eps_p, eps_d)
    for _ in range(50):
        optim.accumulate(acc, g.normal(scale=1.0, size=(3, 3)))
        optim.pulses_due(acc)
        assert np.all((-eps_d < acc.chi) & (acc.chi < eps_p))


def test_sign_routing_on_differential_array():
    m = dataclasses.replace(dev.DeviceModelParams(), read_noise_frac=0.0)
    a = cb.CrossbarArray(3, 3, "differential", m)
    acc = optim.ChiAccumulator(np.array([[0.3, -0.3, 0.0]] * 3), 0.096, 0.096)
    optim.flush(acc, a, 1.0)
    assert a.planes[0].pulse_count[:, 1].sum() == 0 and a.planes[1].pulse_count[:, 0].sum() == 0
    assert a.planes[0].pulse_count[:, 0].sum() == 9 and a.planes[1].pulse_count[:, 1].sum() == 9


@pytest.mark.parametrize("bits", [None, 3, 8])
def test_deterministic_device_tracks_sgd(bits):
    """Linear regression trained through chi and an ideal device stays within eps of
    the full-precision weights driven by the same update stream."""
    g = np.random.default_rng(1)
    n_in, n_out, eps = 6, 3, 0.05
    w_true = g.normal(size=(n_in, n_out))
    arr = IdealArray(np.zeros((n_in, n_out)), eps, eps)
    acc = optim.ChiAccumulator.zeros((n_in, n_out), eps, eps)
    shadow = np.zeros((n_in, n_out))
    for step in range(3000):
        x = g.normal(size=n_in)
        delta = x @ w_true - x @ arr.w  # negative gradient of 1/2 |y - t|^2
        u = optim.compute_update_lowprec(x, delta, 0.02, bits)
        u.add_to(shadow)
        optim.accumulate(acc, u)
        optim.flush(acc, arr, float(step))
        assert np.all(np.abs(arr.w - shadow) < eps + 1e-12)
    assert np.abs(arr.w - w_true).max() < 3 * eps
