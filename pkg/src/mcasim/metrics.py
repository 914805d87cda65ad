"""Accuracy, bits per character, Frechet distance and event cost accounting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .counters import EventCounters


class MetricError(ValueError):
    pass


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax equals the label.

    ``predictions`` may be scores (n x classes) or predicted class indices.
    ``np.argmax`` breaks ties toward the lowest index.
    """
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape[0] != y.shape[0]:
        raise MetricError(f"{p.shape[0]} predictions for {y.shape[0]} labels")
    if y.shape[0] == 0:
        raise MetricError("accuracy of an empty set is undefined")
    if p.ndim == 2:
        p = np.argmax(p, axis=1)
    return float(np.mean(p == y))


def bpc(probabilities, targets) -> float:
    """Mean base-2 cross-entropy per step; ``targets`` are one-hot rows or indices."""
    p = np.asarray(probabilities, dtype=float)
    if p.ndim != 2:
        raise MetricError("probabilities must be steps x symbols")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise MetricError("probability rows must sum to 1")
    t = np.asarray(targets)
    idx = np.argmax(t, axis=1) if t.ndim == 2 else t.astype(np.int64)
    q = p[np.arange(p.shape[0]), idx]
    zero = np.flatnonzero(q <= 0)
    if zero.size:
        raise MetricError(f"zero probability at the target of step {int(zero[0])}")
    return float(-np.mean(np.log2(q)))


def _sqrtm_psd(c):
    w, v = np.linalg.eigh((c + c.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(feats_a, feats_b) -> float:
    """``|mu_a - mu_b|^2 + Tr(C_a + C_b - 2 (C_a C_b)^(1/2))`` from sample statistics.

    The trace term uses ``(C_a^(1/2) C_b C_a^(1/2))^(1/2)``, which is symmetric
    and has the same trace for positive semi-definite inputs.
    """
    a = np.asarray(feats_a, dtype=float)
    b = np.asarray(feats_b, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise MetricError("need at least 2 samples per set")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise MetricError("non-finite features")
    mu = a.mean(axis=0) - b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    ra = _sqrtm_psd(ca)
    cross = np.trace(_sqrtm_psd(ra @ cb @ ra))
    return float(mu @ mu + np.trace(ca) + np.trace(cb) - 2.0 * cross)


@dataclass(frozen=True)
class UnitCosts:
    """Per-event costs in arbitrary (consistent) units."""

    set_pulse: float = 0.0
    reset_pulse: float = 0.0
    device_read: float = 0.0
    chi_write: float = 0.0
    refresh_event: float = 0.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise MetricError(f"unit cost {k} must be >= 0")


_STAGES = (("set_pulses", "set_pulse"), ("reset_pulses", "reset_pulse"), ("device_reads", "device_read"),
           ("chi_writes", "chi_write"), ("refresh_events", "refresh_event"))


def cost_report(counters: EventCounters, unit_costs: UnitCosts) -> dict[str, float]:
    """Per-stage cost (count times unit cost) plus ``total``."""
    out = {}
    for count_name, cost_name in _STAGES:
        out[count_name] = getattr(counters, count_name) * getattr(unit_costs, cost_name)
    out["total"] = sum(out.values())
    return out
