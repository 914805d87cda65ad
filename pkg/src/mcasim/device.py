"""Stochastic behavioral model of a phase-change memory (PCM) device.

Conductances are in microsiemens, times in seconds.  A SET pulse adds a
random, state-dependent increment whose mean saturates exponentially; a RESET
pulse drops the device to a low, noisy level.  After every programming event
the conductance drifts as ``g_prog * (dt / t0) ** -nu`` with a freshly sampled
exponent, and each read sees multiplicative Gaussian noise.

All sampling goes through one set of compiled scalar kernels.  The array
functions (``set_increment``, ``read`` ...), the in-place crossbar kernels and
the ``DeviceState`` wrappers share them, so a single device and the same
device inside an array produce bit-identical samples.
"""
from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numba
import numpy as np

from . import rng


class DeviceError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceModelParams:
    mu0: float = 1.1
    g_sat: float = 5.0
    g_max: float = 12.0
    sigma_rel: float = 0.4
    sigma_floor: float = 0.05
    reset_mean: float = 0.1
    reset_std: float = 0.05
    nu_mean: float = 0.05
    nu_std: float = 0.02
    t0_ref: float = 1.0
    read_noise_frac: float = 0.02

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) and not (f.name == "g_sat" and v == np.inf):
                raise DeviceError(f"{f.name} must be finite, got {v}")
            if v < 0:
                raise DeviceError(f"{f.name} must be >= 0, got {v}")
        if self.g_sat <= 0:
            raise DeviceError("g_sat must be > 0")
        if self.mu0 <= 0:
            raise DeviceError("mu0 must be > 0 (SET pulses only increase conductance)")
        if self.t0_ref <= 0:
            raise DeviceError("t0_ref must be > 0")
        if self.g_max <= self.reset_mean:
            raise DeviceError("g_max must exceed reset_mean")

    def mean_increment(self, g):
        """Expected conductance change of one full SET pulse at conductance ``g``."""
        return self.mu0 * np.exp(-np.asarray(g, dtype=float) / self.g_sat)

    def increment_std(self, g):
        return np.maximum(self.sigma_rel * self.mean_increment(g), self.sigma_floor)

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @functools.cached_property
    def kernel(self) -> tuple:
        """Parameters as a flat float tuple for the compiled kernels (field order)."""
        return tuple(float(getattr(self, f.name)) for f in dataclasses.fields(self))

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceModelParams":
        return cls(**{k: float(v) for k, v in d.items()})


# ---------------------------------------------------------------------------
# array-level primitives


# Scalar kernels.  ``p`` is DeviceModelParams.kernel:
# 0 mu0, 1 g_sat, 2 g_max, 3 sigma_rel, 4 sigma_floor, 5 reset_mean, 6 reset_std,
# 7 nu_mean, 8 nu_std, 9 t0_ref, 10 read_noise_frac


@numba.njit(cache=True, inline="always")
def _set_one(g, ident, ev, key, p, scale):
    mu = scale * p[0] * math.exp(-g / p[1])
    sigma = max(p[3] * mu, p[4])
    dg = max(mu + sigma * rng.normal1(key, ident, ev), 0.0)
    return min(max(g + dg, 0.0), p[2])


@numba.njit(cache=True, inline="always")
def _reset_one(ident, ev, key, p):
    return min(max(p[5] + p[6] * rng.normal1(key, ident, ev), 0.0), p[2])


@numba.njit(cache=True, inline="always")
def _nu_one(ident, ev, key, p):
    return max(p[7] + p[8] * rng.normal1(key, ident, ev), 0.0)


@numba.njit(cache=True, inline="always")
def _read_one(g_prog, t_prog, nu, t_now, ident, ev, key, p):
    elapsed = max(t_now - t_prog, p[9])
    g = g_prog * math.exp(-nu * math.log(elapsed / p[9]))
    if p[10] > 0.0:
        g *= 1.0 + p[10] * rng.normal1(key, ident, ev)
    return min(max(g, 0.0), p[2])


@numba.njit(cache=True)
def _set_vec(g, ids, evs, key, p, scale, out):
    for k in range(g.shape[0]):
        out[k] = _set_one(g[k], ids[k], evs[k], key, p, scale[k])


@numba.njit(cache=True)
def _reset_vec(ids, evs, key, p, out):
    for k in range(ids.shape[0]):
        out[k] = _reset_one(ids[k], evs[k], key, p)


@numba.njit(cache=True)
def _nu_vec(ids, evs, key, p, out):
    for k in range(ids.shape[0]):
        out[k] = _nu_one(ids[k], evs[k], key, p)


@numba.njit(cache=True)
def _read_vec(g_prog, t_prog, nu, t_now, ids, evs, key, p, out):
    for k in range(g_prog.shape[0]):
        out[k] = _read_one(g_prog[k], t_prog[k], nu[k], t_now[k], ids[k], evs[k], key, p)


@numba.njit(cache=True)
def apply_pulses(g_prog, t_prog, nu, pulse_count, ids, flat, counts, reset, t_now, k_set, k_reset, k_nu, p):
    """Apply ``counts[k]`` pulses to device ``flat[k]`` of raveled plane arrays, in place.

    Returns the number of pulses, or -1 (nothing applied) if any addressed
    device was programmed after ``t_now``.
    """
    for k in range(flat.shape[0]):
        if t_prog[flat[k]] > t_now:
            return -1
    n = 0
    for k in range(flat.shape[0]):
        f = flat[k]
        for _ in range(counts[k]):
            ev = pulse_count[f]
            if reset:
                g_prog[f] = _reset_one(ids[f], ev, k_reset, p)
            else:
                g_prog[f] = _set_one(g_prog[f], ids[f], ev, k_set, p, 1.0)
            nu[f] = _nu_one(ids[f], ev, k_nu, p)
            pulse_count[f] = ev + 1
            n += 1
        if counts[k] > 0:
            t_prog[f] = t_now
    return n


@numba.njit(cache=True)
def read_into(g_prog, t_prog, nu, ids, flat, t_now, ev, key, p, out):
    """``out[f] = read(device f)`` for every ``f`` in ``flat`` (raveled arrays)."""
    for k in range(flat.shape[0]):
        f = flat[k]
        out[f] = _read_one(g_prog[f], t_prog[f], nu[f], t_now, ids[f], ev, key, p)


def _flat(*arrays, dtypes):
    b = np.broadcast_arrays(*[np.asarray(a) for a in arrays])
    shape = b[0].shape
    return [np.array(x, dtype=d).ravel() for x, d in zip(b, dtypes)], shape


def set_increment(g, ids, events, model: DeviceModelParams, seed: int, scale=1.0):
    """Conductance after one SET pulse.

    ``scale`` shrinks the pulse (mean and spread) to mimic a reduced programming
    current; only the program-and-verify loop uses values below 1.
    """
    (g, ids, events, scale), shape = _flat(g, ids, events, scale,
                                          dtypes=(np.float64, np.uint64, np.uint64, np.float64))
    out = np.empty(g.shape[0])
    _set_vec(g, ids, events, rng.stream_key(seed, rng.SET_INCREMENT), model.kernel, scale, out)
    return out.reshape(shape)


def reset_level(ids, events, model: DeviceModelParams, seed: int):
    (ids, events), shape = _flat(ids, events, dtypes=(np.uint64, np.uint64))
    out = np.empty(ids.shape[0])
    _reset_vec(ids, events, rng.stream_key(seed, rng.RESET_LEVEL), model.kernel, out)
    return out.reshape(shape)


def sample_nu(ids, events, model: DeviceModelParams, seed: int):
    (ids, events), shape = _flat(ids, events, dtypes=(np.uint64, np.uint64))
    out = np.empty(ids.shape[0])
    _nu_vec(ids, events, rng.stream_key(seed, rng.DRIFT_EXPONENT), model.kernel, out)
    return out.reshape(shape)


def drifted(g_prog, t_prog, nu, t_now, t0_ref):
    """Noiseless conductance at ``t_now``; drift is flat within ``t0_ref`` of programming."""
    elapsed = np.maximum(np.asarray(t_now, dtype=float) - t_prog, t0_ref)
    return g_prog * np.exp(-nu * np.log(elapsed / t0_ref))


def read(g_prog, t_prog, nu, t_now, ids, events, model: DeviceModelParams, seed: int,
         stream: str = rng.READ_NOISE):
    """Noisy read of drifted conductances, clamped to ``[0, g_max]``."""
    (g, tp, nu, tn, ids, events), shape = _flat(
        g_prog, t_prog, nu, t_now, ids, events,
        dtypes=(np.float64, np.float64, np.float64, np.float64, np.uint64, np.uint64))
    out = np.empty(g.shape[0])
    _read_vec(g, tp, nu, tn, ids, events, rng.stream_key(seed, stream), model.kernel, out)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# single device


@dataclass(frozen=True)
class DeviceState:
    g_prog: float
    t_prog: float = 0.0
    nu: float = 0.0
    pulse_count: int = 0
    device_id: int = 0

    def _advance(self, g_new: float, t_now: float, event_index: int, model, seed) -> "DeviceState":
        if t_now < self.t_prog:
            raise DeviceError(f"t_now={t_now} precedes last programming at {self.t_prog}")
        nu = sample_nu([self.device_id], [event_index], model, seed)[0]
        return DeviceState(float(g_new), float(t_now), float(nu), self.pulse_count + 1, self.device_id)


def apply_set_pulse(dev: DeviceState, model: DeviceModelParams, event_index: int | None = None,
                    *, t_now: float | None = None, seed: int = 0, scale: float = 1.0) -> DeviceState:
    """One SET pulse.  ``event_index`` defaults to the device's pulse count."""
    ev = dev.pulse_count if event_index is None else event_index
    t = dev.t_prog if t_now is None else t_now
    g = set_increment([dev.g_prog], [dev.device_id], [ev], model, seed, scale)[0]
    return dev._advance(g, t, ev, model, seed)


def apply_reset_pulse(dev: DeviceState, model: DeviceModelParams, event_index: int | None = None,
                      *, t_now: float | None = None, seed: int = 0) -> DeviceState:
    ev = dev.pulse_count if event_index is None else event_index
    t = dev.t_prog if t_now is None else t_now
    g = reset_level([dev.device_id], [ev], model, seed)[0]
    return dev._advance(g, t, ev, model, seed)


def read_conductance(dev: DeviceState, model: DeviceModelParams, t_now: float, event_index: int = 0,
                     *, seed: int = 0) -> float:
    if t_now < dev.t_prog:
        raise DeviceError(f"cannot read at t={t_now} before programming time {dev.t_prog}")
    return float(read([dev.g_prog], [dev.t_prog], [dev.nu], t_now, [dev.device_id], [event_index],
                      model, seed)[0])


# ---------------------------------------------------------------------------
# program and verify

# fraction of the remaining error a reduced-current SET pulse aims for
_AIM = 0.6


@dataclass
class ProgramResult:
    g_prog: np.ndarray
    t_prog: np.ndarray
    nu: np.ndarray
    pulse_count: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    set_pulses: int = 0
    reset_pulses: int = 0


def program_many(g_prog, t_prog, nu, pulse_count, ids, targets, model: DeviceModelParams, *,
                 margin: float, max_iter: int = 20, t_now: float = 0.0, seed: int = 0) -> ProgramResult:
    """Vectorized iterative program-and-verify over many devices.

    Verify reads are noiseless and taken at the reference delay, so they see
    ``g_prog``.  Below target the device receives a SET pulse whose current is
    reduced once the remaining error is smaller than a full pulse; above target
    it is RESET and the SET staircase starts over.
    """
    if margin <= 0:
        raise DeviceError("margin must be > 0")
    g = np.array(g_prog, dtype=float).ravel()
    tp = np.array(t_prog, dtype=float).ravel()
    nu_out = np.array(nu, dtype=float).ravel()
    pc = np.array(pulse_count, dtype=np.int64).ravel()
    ids = np.asarray(ids, dtype=np.uint64).ravel()
    targets = np.asarray(targets, dtype=float).ravel()
    if np.any(targets < 0) or np.any(targets > model.g_max):
        raise DeviceError("targets must lie in [0, g_max]")
    iters = np.zeros(g.shape, dtype=np.int64)
    n_set = n_reset = 0
    for _ in range(max_iter):
        err = targets - g
        low = err > margin
        high = err < -margin
        if not (low.any() or high.any()):
            break
        if low.any():
            idx = np.flatnonzero(low)
            mu = model.mean_increment(g[idx])
            scale = np.minimum(1.0, _AIM * err[idx] / mu)
            g[idx] = set_increment(g[idx], ids[idx], pc[idx], model, seed, scale)
            nu_out[idx] = sample_nu(ids[idx], pc[idx], model, seed)
            n_set += idx.size
        if high.any():
            idx = np.flatnonzero(high)
            g[idx] = reset_level(ids[idx], pc[idx], model, seed)
            nu_out[idx] = sample_nu(ids[idx], pc[idx], model, seed)
            n_reset += idx.size
        active = low | high
        pc[active] += 1
        tp[active] = t_now
        iters[active] += 1
    converged = np.abs(targets - g) <= margin
    return ProgramResult(g, tp, nu_out, pc, converged, iters, n_set, n_reset)


def iterative_program(dev: DeviceState, model: DeviceModelParams, target: float, margin: float,
                      max_iter: int = 20, *, t_now: float | None = None, seed: int = 0):
    """Program one device toward ``target``; returns ``(state, converged)``."""
    if not 0 <= target <= model.g_max:
        raise DeviceError(f"target {target} outside [0, {model.g_max}]")
    t = dev.t_prog if t_now is None else t_now
    r = program_many([dev.g_prog], [dev.t_prog], [dev.nu], [dev.pulse_count], [dev.device_id], [target],
                     model, margin=margin, max_iter=max_iter, t_now=t, seed=seed)
    state = DeviceState(float(r.g_prog[0]), float(r.t_prog[0]), float(r.nu[0]), int(r.pulse_count[0]),
                        dev.device_id)
    return state, bool(r.converged[0])


# ---------------------------------------------------------------------------
# drift fitting and characterization


def fit_drift_exponent(series: Iterable[tuple[float, float]]) -> float:
    """Drift exponent from ``(t, G)`` pairs: minus the log-log least-squares slope."""
    pts = np.asarray(list(series), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise DeviceError("need at least 3 (t, G) points")
    t, g = pts[:, 0], pts[:, 1]
    if np.any(t <= 0) or np.any(g <= 0):
        raise DeviceError("times and conductances must be positive")
    slope = np.polyfit(np.log(t), np.log(g), 1)[0]
    return float(-slope)


# initial state of the characterization population
CHAR_INIT_MEAN = 0.06
CHAR_INIT_STD = 0.02


@dataclass
class CharacterizationTable:
    pulse_index: np.ndarray
    mean_uS: np.ndarray
    std_uS: np.ndarray
    n_devices: int
    seed: int
    params: DeviceModelParams
    meta: dict = field(default_factory=dict)

    @property
    def mean_tolerance(self) -> np.ndarray:
        """Three standard errors of each per-pulse mean."""
        return 3.0 * self.std_uS / np.sqrt(self.n_devices)

    def rows(self):
        return list(zip(self.pulse_index.tolist(), self.mean_uS.tolist(), self.std_uS.tolist()))


def characterize(model: DeviceModelParams, n_devices: int, n_pulses: int, seed: int = 0,
                 dt: float = 1.0) -> CharacterizationTable:
    """Apply ``n_pulses`` SET pulses to a fresh population and tabulate read statistics.

    Each read is taken at the reference delay after the preceding pulse, with
    read noise.  Pulse amplitude and width are kept only as metadata.
    """
    if n_devices < 1 or n_pulses < 0:
        raise DeviceError("need n_devices >= 1 and n_pulses >= 0")
    ids = np.arange(n_devices, dtype=np.uint64)
    z = rng.normal(rng.stream_key(seed, rng.INIT_TARGET), ids, 0)
    g = np.maximum(CHAR_INIT_MEAN + CHAR_INIT_STD * z, 0.0)
    nu = np.zeros(n_devices)
    t_prog = 0.0
    means, stds = [], []
    for k in range(n_pulses + 1):
        if k > 0:
            g = set_increment(g, ids, k - 1, model, seed)
            nu = sample_nu(ids, k - 1, model, seed)
            t_prog = k * dt
        r = read(g, t_prog, nu, t_prog + model.t0_ref, ids, k, model, seed)
        means.append(r.mean())
        stds.append(r.std())
    meta = {"amplitude_uA": 90.0, "duration_ns": 50.0}
    return CharacterizationTable(np.arange(n_pulses + 1), np.array(means), np.array(stds),
                                 n_devices, seed, model, meta)


def moment_recursion(model: DeviceModelParams, m0: float, n_pulses: int) -> np.ndarray:
    """First-order mean propagation ``m_{k+1} = m_k + mu(m_k)``."""
    m = [m0]
    for _ in range(n_pulses):
        m.append(min(m[-1] + float(model.mean_increment(m[-1])), model.g_max))
    return np.array(m)


# ---------------------------------------------------------------------------
# calibration from measurements


def calibrate_set_curve(rows: Sequence[tuple[int, int, float]], base: DeviceModelParams) -> DeviceModelParams:
    """Fit ``mu0``, ``g_sat`` and ``sigma_rel`` to ``(device_id, pulse_index, g)`` records."""
    from scipy.optimize import curve_fit

    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DeviceError("expected (device_id, pulse_index, g_uS) rows")
    g_before, dg = [], []
    for dev in np.unique(arr[:, 0]):
        d = arr[arr[:, 0] == dev]
        d = d[np.argsort(d[:, 1])]
        consecutive = np.diff(d[:, 1]) == 1
        g_before.append(d[:-1, 2][consecutive])
        dg.append(np.diff(d[:, 2])[consecutive])
    g_before = np.concatenate(g_before)
    dg = np.concatenate(dg)
    if g_before.size < 3:
        raise DeviceError("not enough consecutive pulse pairs to fit")

    def curve(g, mu0, g_sat):
        return mu0 * np.exp(-g / g_sat)

    (mu0, g_sat), _ = curve_fit(curve, g_before, dg, p0=(base.mu0, base.g_sat),
                                bounds=([1e-6, 1e-3], [np.inf, np.inf]))
    mu = curve(g_before, mu0, g_sat)
    rel = (dg - mu) / mu
    sigma_rel = float(np.sqrt(np.mean(rel ** 2)))
    return dataclasses.replace(base, mu0=float(mu0), g_sat=float(g_sat), sigma_rel=sigma_rel)


def calibrate_drift(rows: Sequence[tuple[int, float, float]], base: DeviceModelParams) -> DeviceModelParams:
    """Fit the drift-exponent distribution and read noise to ``(device_id, t, g)`` records.

    Times are measured from the programming event.  The residual spread around
    each device's log-log fit estimates the relative read noise.
    """
    arr = np.asarray(rows, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DeviceError("expected (device_id, t_s, g_uS) rows")
    nus, resid = [], []
    for dev in np.unique(arr[:, 0]):
        d = arr[arr[:, 0] == dev]
        d = d[(d[:, 1] > 0) & (d[:, 2] > 0)]
        if d.shape[0] < 3:
            continue
        lt, lg = np.log(d[:, 1]), np.log(d[:, 2])
        slope, icpt = np.polyfit(lt, lg, 1)
        nus.append(-slope)
        resid.append(lg - (slope * lt + icpt))
    if not nus:
        raise DeviceError("no device has >= 3 positive samples")
    nus = np.array(nus)
    r = np.concatenate(resid)
    return dataclasses.replace(
        base,
        nu_mean=float(max(nus.mean(), 0.0)),
        nu_std=float(nus.std(ddof=1)) if nus.size > 1 else 0.0,
        read_noise_frac=float(r.std()),
    )
