"""Crossbar arrays of PCM synapses.

Orientation: array rows are layer inputs, columns are layer outputs, so the
forward product is ``y_j = sum_i W[i, j] x_i`` and the backward product is
``e_i = sum_j W[i, j] d_j``.

Device state is stored as one "plane" of arrays per device role: two planes
(G+ and G-) for differential synapses, one for the reference scheme.  Software
keeps the most recent read of each device in ``g_read``; which devices get
re-read, and when, is set by the read policy.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numba
import numpy as np

from . import device as dev
from . import rng
from .counters import EventCounters

CHECKPOINT_VERSION = 1


class CrossbarError(ValueError):
    pass


class Scheme(str, Enum):
    DIFFERENTIAL = "differential"
    REFERENCE = "reference"


@dataclass(frozen=True)
class Differential:
    gp: dev.DeviceState
    gn: dev.DeviceState


@dataclass(frozen=True)
class Reference:
    g: dev.DeviceState
    reference: float | str = "mean"


@dataclass(frozen=True)
class ReadPolicy:
    """How software refreshes its copy of the conductances.

    ``full``: every matvec re-reads every device.
    ``subset``: after an example that programmed anything, re-read
    ``subset_pairs`` synapses round robin (all when None) plus the programmed ones.
    ``cached``: only programmed devices are re-read.
    """

    kind: str = "subset"
    subset_pairs: int | None = None

    def __post_init__(self):
        if self.kind not in ("full", "subset", "cached"):
            raise CrossbarError(f"unknown read policy {self.kind!r}")
        if self.subset_pairs is not None and self.subset_pairs < 1:
            raise CrossbarError("subset_pairs must be >= 1")


@dataclass(frozen=True)
class RefreshPolicy:
    period: int = 100
    g_high: float = 8.0
    g_diff: float = 6.0
    max_set: int = 3
    pulse_unit: float = 0.77
    distributed: bool = False

    def due(self, example_count: int) -> bool:
        return self.distributed or example_count % self.period == 0


@dataclass
class RefreshReport:
    scanned: int = 0
    refreshed: int = 0
    set_pulses: int = 0
    reset_pulses: int = 0
    rows: np.ndarray | None = None
    cols: np.ndarray | None = None


# ---------------------------------------------------------------------------
# quantization


@dataclass(frozen=True)
class QuantizedVector:
    codes: np.ndarray
    scale: float
    bits: int

    def dequantize(self) -> np.ndarray:
        return self.codes * self.scale

    def __len__(self):
        return self.codes.shape[0]


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@numba.njit(cache=True)
def _quantize(v, top, codes):
    m = 0.0
    for k in range(v.shape[0]):
        a = abs(v[k])
        if not np.isfinite(a):
            return -1.0
        if a > m:
            m = a
    scale = m / top
    if scale == 0.0:  # zero vector, or a subnormal peak that underflows
        scale = 1.0
    for k in range(v.shape[0]):
        q = v[k] / scale
        c = min(np.floor(abs(q) + 0.5), top)
        codes[k] = np.int64(c) if q >= 0.0 else -np.int64(c)
    return scale


def quantize_vector(v, bits: int) -> QuantizedVector:
    """Symmetric signed quantization with a shared max-abs scale."""
    v = np.ascontiguousarray(v, dtype=float)
    if bits < 2:
        raise CrossbarError("bits must be >= 2")
    if v.ndim != 1:
        raise CrossbarError("quantize_vector expects a 1-D vector")
    codes = np.empty(v.shape[0], dtype=np.int64)
    scale = _quantize(v, float(2 ** (bits - 1) - 1), codes)
    if scale < 0:
        raise CrossbarError("cannot quantize non-finite values")
    return QuantizedVector(codes, float(scale), bits)


def quantize(v, bits: int | None) -> np.ndarray:
    """Quantize-dequantize; ``bits=None`` passes through."""
    if bits is None:
        return np.asarray(v, dtype=float)
    q = quantize_vector(v, bits)
    return q.codes * q.scale


def quantize_rows(m, bits: int | None) -> np.ndarray:
    """Row-wise quantize-dequantize of a batch, one shared scale per row."""
    m = np.asarray(m, dtype=float)
    if bits is None:
        return m
    top = 2 ** (bits - 1) - 1
    peak = np.max(np.abs(m), axis=1, keepdims=True)
    scale = peak / top
    scale[scale == 0] = 1.0
    return np.clip(_round_half_away(m / scale), -top, top) * scale


# ---------------------------------------------------------------------------
# matvec kernels on cached conductances


@numba.njit(cache=True)
def _w(a, b, gain, clip):
    w = (a - b) * gain
    if clip > 0.0:
        if w > clip:
            w = clip
        elif w < -clip:
            w = -clip
    return w


@numba.njit(cache=True)
def _forward_diff(x, gp, gn, gain, clip, out):
    rows, cols = gp.shape
    out[:] = 0.0
    for i in range(rows):
        xi = x[i]
        if xi == 0.0:
            continue
        for j in range(cols):
            out[j] += xi * _w(gp[i, j], gn[i, j], gain, clip)


@numba.njit(cache=True)
def _forward_ref(x, g, gref, gain, clip, out):
    rows, cols = g.shape
    out[:] = 0.0
    for i in range(rows):
        xi = x[i]
        if xi == 0.0:
            continue
        for j in range(cols):
            out[j] += xi * _w(g[i, j], gref, gain, clip)


@numba.njit(cache=True)
def _backward_diff(d, gp, gn, gain, clip, out):
    rows, cols = gp.shape
    for i in range(rows):
        s = 0.0
        for j in range(cols):
            if d[j] != 0.0:
                s += d[j] * _w(gp[i, j], gn[i, j], gain, clip)
        out[i] = s


@numba.njit(cache=True)
def _backward_ref(d, g, gref, gain, clip, out):
    rows, cols = g.shape
    for i in range(rows):
        s = 0.0
        for j in range(cols):
            if d[j] != 0.0:
                s += d[j] * _w(g[i, j], gref, gain, clip)
        out[i] = s


# ---------------------------------------------------------------------------


class DevicePlane:
    """Struct-of-arrays state for one device role across the whole array."""

    def __init__(self, rows: int, cols: int, id_base: int):
        shape = (rows, cols)
        self.g_prog = np.zeros(shape)
        self.t_prog = np.zeros(shape)
        self.nu = np.zeros(shape)
        self.pulse_count = np.zeros(shape, dtype=np.int64)
        self.g_read = np.zeros(shape)
        self.ids = (np.uint64(id_base) + np.arange(rows * cols, dtype=np.uint64)).reshape(shape)

    FIELDS = ("g_prog", "t_prog", "nu", "pulse_count", "g_read")

    def state(self, i: int, j: int) -> dev.DeviceState:
        return dev.DeviceState(float(self.g_prog[i, j]), float(self.t_prog[i, j]), float(self.nu[i, j]),
                               int(self.pulse_count[i, j]), int(self.ids[i, j]))


REFERENCE_MEANS = ("mean", "network-mean")


class ReferenceGroup:
    """Reference level shared by several reference-scheme arrays.

    The level is the mean conductance over every device of every member, so
    one layer drifting or being reset en masse moves it only in proportion
    to that layer's share of the devices.
    """

    def __init__(self, members=()):
        self.members: list[CrossbarArray] = []
        for m in members:
            self.add(m)

    def add(self, arr: "CrossbarArray"):
        if arr.scheme is not Scheme.REFERENCE:
            raise CrossbarError("only reference-scheme arrays can share a reference level")
        arr.ref_group = self
        self.members.append(arr)

    def level(self) -> float:
        return sum(m.read_sum() for m in self.members) / sum(m.rows * m.cols for m in self.members)

    def fresh_level(self, t_now: float) -> float:
        """Mean of fresh reads at ``t_now`` (the same values ``read_conductances`` returns)."""
        tot = sum(float(m.read_conductances(t_now, count=False)[0].sum()) for m in self.members)
        return tot / sum(m.rows * m.cols for m in self.members)


class CrossbarArray:
    def __init__(self, rows: int, cols: int, scheme: Scheme | str, model: dev.DeviceModelParams, *,
                 g_scale: float = 8.0, dac_bits: int | None = 8, adc_bits: int | None = 8,
                 weight_clip: float | None = None, reference: float | str = "mean",
                 g_range: tuple[float, float] = (0.1, 8.0), read_policy: ReadPolicy = ReadPolicy(),
                 seed: int = 0, id_base: int = 0, counters: EventCounters | None = None):
        if rows < 1 or cols < 1:
            raise CrossbarError("dimensions must be >= 1")
        if g_scale <= 0:
            raise CrossbarError("g_scale must be > 0")
        for b in (dac_bits, adc_bits):
            if b is not None and not 2 <= b <= 16:
                raise CrossbarError("quantizer widths must lie in [2, 16]")
        self.rows, self.cols = rows, cols
        self.scheme = Scheme(scheme)
        self.model = model
        self._g_scale = float(g_scale)
        self.dac_bits, self.adc_bits = dac_bits, adc_bits
        self.weight_clip = weight_clip
        self.reference = reference
        self.g_range = (float(g_range[0]), float(g_range[1]))
        self.read_policy = read_policy
        self.seed = int(seed)
        self.id_base = int(id_base)
        self.counters = counters if counters is not None else EventCounters()
        n_planes = 2 if self.scheme is Scheme.DIFFERENTIAL else 1
        self.planes = [DevicePlane(rows, cols, id_base + p * rows * cols) for p in range(n_planes)]
        self.read_cycle = 0
        self.rr_ptr = 0
        self.refresh_ptr = 0
        self._pending: list[list[np.ndarray]] = [[] for _ in self.planes]
        self._gsum = None
        self.ref_group: ReferenceGroup | None = None

    # -- mapping ---------------------------------------------------------

    @property
    def weight_clip(self) -> float | None:
        return self._weight_clip

    @weight_clip.setter
    def weight_clip(self, value):
        if value is not None and not 0 < value <= 1:
            raise CrossbarError("weight_clip must lie in (0, 1]")
        self._weight_clip = value

    @property
    def g_scale(self) -> float:
        """Conductance (uS) per unit weight.

        The reference scheme maps its conductance window ``g_range`` linearly
        onto ``[-clip, clip]``, so its scale follows the clip schedule.
        """
        if self.scheme is Scheme.REFERENCE:
            return (self.g_range[1] - self.g_range[0]) / (2.0 * self._clip_value())
        return self._g_scale

    def _clip_value(self) -> float:
        if self.scheme is Scheme.REFERENCE:
            return 1.0 if self.weight_clip is None else self.weight_clip
        return self.weight_clip if self.weight_clip is not None else 0.0

    def reference_level(self, g=None) -> float:
        """Reference conductance: a fixed value, this array's mean, or its group's mean.

        ``g`` supplies conductances to average instead of the software copy.
        """
        if self.scheme is not Scheme.REFERENCE:
            raise CrossbarError("differential arrays have no reference level")
        if self.reference not in REFERENCE_MEANS:
            return float(self.reference)
        if g is not None:
            return float(g.mean())
        if self.ref_group is not None:
            return self.ref_group.level()
        return self.read_sum() / (self.rows * self.cols)

    def read_sum(self) -> float:
        """Sum of the software copy of the (single) reference-scheme plane."""
        if self._gsum is None:
            self._gsum = float(self.planes[0].g_read.sum())
        return self._gsum

    def weights_from(self, planes_g, g_ref: float | None = None) -> np.ndarray:
        """Weight matrix for given conductance planes under the current mapping."""
        clip = self._clip_value()
        if self.scheme is Scheme.DIFFERENTIAL:
            w = (planes_g[0] - planes_g[1]) / self.g_scale
        else:
            ref = self.reference_level(planes_g[0]) if g_ref is None else g_ref
            w = (planes_g[0] - ref) / self.g_scale
        return np.clip(w, -clip, clip) if clip > 0 else w

    def cached_weights(self) -> np.ndarray:
        if self.scheme is Scheme.REFERENCE:
            return self.weights_from([self.planes[0].g_read], self.reference_level())
        return self.weights_from([p.g_read for p in self.planes])

    def synapse(self, i: int, j: int):
        if self.scheme is Scheme.DIFFERENTIAL:
            return Differential(self.planes[0].state(i, j), self.planes[1].state(i, j))
        return Reference(self.planes[0].state(i, j), self.reference)

    @property
    def n_devices(self) -> int:
        return self.rows * self.cols * len(self.planes)

    # -- reads -----------------------------------------------------------

    def _read_into_cache(self, p: int, flat, t_now: float):
        pl = self.planes[p]
        if flat is None:
            flat = np.arange(pl.g_prog.size, dtype=np.int64)
        dev.read_into(pl.g_prog.reshape(-1), pl.t_prog.reshape(-1), pl.nu.reshape(-1), pl.ids.reshape(-1),
                      flat, float(t_now), np.uint64(self.read_cycle), rng.stream_key(self.seed, rng.READ_NOISE),
                      self.model.kernel, pl.g_read.reshape(-1))
        self._gsum = None
        self.counters.device_reads += flat.size

    def read_all(self, t_now: float):
        """Fresh read of every device into the software copy."""
        for p in range(len(self.planes)):
            self._read_into_cache(p, None, t_now)
            self._pending[p].clear()
        self.read_cycle += 1

    def read_conductances(self, t_now: float, stream: str = rng.EVAL_READ_NOISE,
                          count: bool = True) -> list[np.ndarray]:
        """Fresh read of every device that leaves the training copy untouched.

        Noise is keyed on the read time, so two reads at the same ``t_now``
        return the same values.
        """
        event = np.float64(t_now).view(np.uint64)
        out = []
        for pl in self.planes:
            out.append(dev.read(pl.g_prog, pl.t_prog, pl.nu, t_now, pl.ids, event, self.model, self.seed,
                                stream=stream))
            if count:
                self.counters.device_reads += pl.g_prog.size
        return out

    def effective_weights(self, t_now: float, policy: str = "fresh") -> np.ndarray:
        if policy == "cached":
            return self.cached_weights()
        if policy != "fresh":
            raise CrossbarError(f"unknown weight read policy {policy!r}")
        g = self.read_conductances(t_now)
        ref = None
        if self.scheme is Scheme.REFERENCE and self.ref_group is not None and self.reference in REFERENCE_MEANS:
            ref = self.ref_group.fresh_level(t_now)
        return self.weights_from(g, ref)

    def sync(self, t_now: float, programmed: bool = True):
        """Refresh the software copy after an example, per the read policy."""
        kind = self.read_policy.kind
        if kind == "full":
            return
        n_pairs = self.rows * self.cols
        if kind == "subset" and programmed:
            k = self.read_policy.subset_pairs
            if k is None or k >= n_pairs:
                self.read_all(t_now)
                return
            start = self.rr_ptr
            idx = (start + np.arange(k)) % n_pairs
            self.rr_ptr = (start + k) % n_pairs
            for p in range(len(self.planes)):
                extra = self._pending[p]
                flat = np.unique(np.concatenate([idx] + extra)) if extra else idx
                self._read_into_cache(p, flat, t_now)
                extra.clear()
            self.read_cycle += 1
        elif kind == "cached" or programmed:
            touched = False
            for p in range(len(self.planes)):
                if self._pending[p]:
                    self._read_into_cache(p, np.unique(np.concatenate(self._pending[p])), t_now)
                    self._pending[p].clear()
                    touched = True
            if touched:
                self.read_cycle += 1

    # -- matvec ----------------------------------------------------------

    def _kernel_args(self):
        clip = self._clip_value()
        gain = 1.0 / self.g_scale
        if self.scheme is Scheme.DIFFERENTIAL:
            return self.planes[0].g_read, self.planes[1].g_read, gain, clip
        return self.planes[0].g_read, self.reference_level(), gain, clip

    def _input(self, v, n: int, what: str) -> np.ndarray:
        if isinstance(v, QuantizedVector):
            x = v.dequantize().astype(float)
        else:
            x = quantize(v, self.dac_bits)
        if x.shape != (n,):
            raise CrossbarError(f"{what} has length {x.shape}, expected {n}")
        return x

    def matvec_forward(self, x, t_now: float) -> np.ndarray:
        x = self._input(x, self.rows, "input")
        if self.read_policy.kind == "full":
            self.read_all(t_now)
        out = np.empty(self.cols)
        a, b, gain, clip = self._kernel_args()
        if self.scheme is Scheme.DIFFERENTIAL:
            _forward_diff(x, a, b, gain, clip, out)
        else:
            _forward_ref(x, a, b, gain, clip, out)
        return quantize(out, self.adc_bits)

    def matvec_backward(self, delta, t_now: float) -> np.ndarray:
        d = self._input(delta, self.cols, "error")
        if self.read_policy.kind == "full":
            self.read_all(t_now)
        out = np.empty(self.rows)
        a, b, gain, clip = self._kernel_args()
        if self.scheme is Scheme.DIFFERENTIAL:
            _backward_diff(d, a, b, gain, clip, out)
        else:
            _backward_ref(d, a, b, gain, clip, out)
        return quantize(out, self.adc_bits)

    # -- programming -----------------------------------------------------

    def _pulse(self, p: int, flat: np.ndarray, counts, t_now: float, kind: str):
        """``counts[k]`` pulses of ``kind`` on device ``flat[k]`` of plane ``p``."""
        flat = np.ascontiguousarray(flat, dtype=np.int64)
        if flat.size == 0:
            return
        counts = np.broadcast_to(np.asarray(counts, dtype=np.int64), flat.shape)
        pl = self.planes[p]
        reset = kind == "reset"
        n = dev.apply_pulses(pl.g_prog.reshape(-1), pl.t_prog.reshape(-1), pl.nu.reshape(-1),
                             pl.pulse_count.reshape(-1), pl.ids.reshape(-1), flat, np.ascontiguousarray(counts),
                             reset, float(t_now), rng.stream_key(self.seed, rng.SET_INCREMENT),
                             rng.stream_key(self.seed, rng.RESET_LEVEL),
                             rng.stream_key(self.seed, rng.DRIFT_EXPONENT), self.model.kernel)
        if n < 0:
            raise CrossbarError("programming time precedes a previous programming event")
        if reset:
            self.counters.reset_pulses += n
        else:
            self.counters.set_pulses += n
        self._pending[p].append(flat)

    def program(self, rows, cols, pulses, t_now: float):
        """Apply signed pulse counts to many synapses (single-shot, no verify)."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        pulses = np.asarray(pulses, dtype=np.int64).ravel()
        if rows.size == 0:
            return
        if (rows.min() < 0 or rows.max() >= self.rows or cols.min() < 0 or cols.max() >= self.cols):
            raise CrossbarError("synapse index out of range")
        if np.any(pulses == 0):
            raise CrossbarError("pulse counts must be non-zero")
        flat = rows * self.cols + cols
        pos = pulses > 0
        if self.scheme is Scheme.DIFFERENTIAL:
            self._pulse(0, flat[pos], pulses[pos], t_now, "set")
            self._pulse(1, flat[~pos], -pulses[~pos], t_now, "set")
        else:
            self._pulse(0, flat[pos], pulses[pos], t_now, "set")
            self._pulse(0, np.unique(flat[~pos]), 1, t_now, "reset")

    def refresh(self, policy: RefreshPolicy, t_now: float) -> RefreshReport:
        """Detect saturated differential pairs and re-program their difference.

        Flagging uses the software copy of the conductances.  A flagged pair is
        RESET on both devices, then the old difference is rewritten as up to
        ``max_set`` SET pulses on the device that carried the sign.
        """
        if self.scheme is not Scheme.DIFFERENTIAL:
            raise CrossbarError("refresh applies to differential arrays only")
        n_pairs = self.rows * self.cols
        if policy.distributed:
            chunk = -(-n_pairs // policy.period)
            flat_scan = (self.refresh_ptr + np.arange(min(chunk, n_pairs))) % n_pairs
            self.refresh_ptr = (self.refresh_ptr + chunk) % n_pairs
            gp = self.planes[0].g_read.reshape(-1)[flat_scan]
            gn = self.planes[1].g_read.reshape(-1)[flat_scan]
        else:
            flat_scan = None
            gp = self.planes[0].g_read.reshape(-1)
            gn = self.planes[1].g_read.reshape(-1)
        diff = gp - gn
        flagged = (np.maximum(gp, gn) > policy.g_high) & (np.abs(diff) < policy.g_diff)
        hit = np.flatnonzero(flagged)
        flat = hit if flat_scan is None else flat_scan[hit]
        report = RefreshReport(scanned=diff.size, refreshed=hit.size)
        if hit.size == 0:
            return report
        before = self.counters.snapshot()
        d = diff[hit]
        n = np.clip(_round_half_away(np.abs(d) / policy.pulse_unit), 0, policy.max_set).astype(np.int64)
        self._pulse(0, flat, 1, t_now, "reset")
        self._pulse(1, flat, 1, t_now, "reset")
        up = n > 0
        self._pulse(0, flat[up & (d > 0)], n[up & (d > 0)], t_now, "set")
        self._pulse(1, flat[up & (d < 0)], n[up & (d < 0)], t_now, "set")
        self.counters.refresh_events += hit.size
        delta = self.counters - before
        report.set_pulses, report.reset_pulses = delta.set_pulses, delta.reset_pulses
        report.rows, report.cols = np.divmod(flat, self.cols)
        return report

    # -- persistence -----------------------------------------------------

    def header(self) -> dict:
        return {
            "rows": self.rows, "cols": self.cols, "scheme": self.scheme.value,
            "model": self.model.to_dict(), "g_scale": self._g_scale, "dac_bits": self.dac_bits,
            "adc_bits": self.adc_bits, "weight_clip": self.weight_clip, "reference": self.reference,
            "g_range": list(self.g_range),
            "read_policy": dataclasses.asdict(self.read_policy), "seed": self.seed,
            "id_base": self.id_base, "read_cycle": self.read_cycle, "rr_ptr": self.rr_ptr,
            "refresh_ptr": self.refresh_ptr, "counters": self.counters.as_dict(),
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p, pl in enumerate(self.planes):
            for name in DevicePlane.FIELDS:
                out[f"plane{p}/{name}"] = getattr(pl, name)
            pend = self._pending[p]
            out[f"plane{p}/pending"] = np.concatenate(pend) if pend else np.zeros(0, dtype=np.int64)
        return out

    @classmethod
    def from_state(cls, header: dict, arrays: dict[str, np.ndarray]) -> "CrossbarArray":
        arr = cls(header["rows"], header["cols"], header["scheme"],
                  dev.DeviceModelParams.from_dict(header["model"]), g_scale=header["g_scale"],
                  dac_bits=header["dac_bits"], adc_bits=header["adc_bits"],
                  weight_clip=header["weight_clip"], reference=header["reference"],
                  g_range=tuple(header["g_range"]), read_policy=ReadPolicy(**header["read_policy"]),
                  seed=header["seed"], id_base=header["id_base"],
                  counters=EventCounters.from_dict(header["counters"]))
        arr.read_cycle, arr.rr_ptr = header["read_cycle"], header["rr_ptr"]
        arr.refresh_ptr = header["refresh_ptr"]
        for p, pl in enumerate(arr.planes):
            for name in DevicePlane.FIELDS:
                setattr(pl, name, np.array(arrays[f"plane{p}/{name}"]))
            pend = np.array(arrays[f"plane{p}/pending"], dtype=np.int64)
            arr._pending[p] = [pend] if pend.size else []
        return arr


@dataclass
class InitReport:
    n_devices: int
    clipped_targets: int
    converged: int
    set_pulses: int
    reset_pulses: int

    @property
    def convergence_rate(self) -> float:
        return self.converged / self.n_devices


def init_array(rows: int, cols: int, scheme: Scheme | str, target_mean: float, target_std: float,
               model: dev.DeviceModelParams, seed: int = 0, *, margin: float = 0.1, max_iter: int = 20,
               t_now: float = 0.0, **kwargs) -> tuple[CrossbarArray, InitReport]:
    """Build an array and program every device toward a Gaussian target distribution.

    Devices start from a RESET state.  Targets outside ``[0, g_max]`` are
    clipped and counted in the report.  The software copy is filled by one
    full read at ``t_now``.
    """
    arr = CrossbarArray(rows, cols, scheme, model, seed=seed, **kwargs)
    key = rng.stream_key(seed, rng.INIT_TARGET)
    n_clipped = n_conv = n_set = n_reset = 0
    for pl in arr.planes:
        ids = pl.ids.reshape(-1)
        targets = target_mean + target_std * rng.normal(key, ids, 0)
        clipped = np.clip(targets, 0.0, model.g_max)
        n_clipped += int(np.count_nonzero(clipped != targets))
        g0 = dev.reset_level(ids, 0, model, seed)
        nu0 = dev.sample_nu(ids, 0, model, seed)
        r = dev.program_many(g0, np.full(ids.size, t_now), nu0, np.ones(ids.size, dtype=np.int64), ids,
                             clipped, model, margin=margin, max_iter=max_iter, t_now=t_now, seed=seed)
        shape = (rows, cols)
        pl.g_prog = r.g_prog.reshape(shape)
        pl.t_prog = r.t_prog.reshape(shape)
        pl.nu = r.nu.reshape(shape)
        pl.pulse_count = r.pulse_count.reshape(shape)
        n_conv += int(r.converged.sum())
        n_set += r.set_pulses
        n_reset += r.reset_pulses + ids.size
    arr.read_all(t_now)
    report = InitReport(arr.n_devices, n_clipped, n_conv, n_set, n_reset)
    return arr, report


def program_pulses(arr: CrossbarArray, i: int, j: int, p: int, t_now: float) -> CrossbarArray:
    if p == 0:
        raise CrossbarError("|p| must be >= 1")
    if not (0 <= i < arr.rows and 0 <= j < arr.cols):
        raise CrossbarError(f"synapse ({i}, {j}) out of range")
    arr.program([i], [j], [p], t_now)
    return arr


def matvec_forward(arr: CrossbarArray, x, t_now: float) -> np.ndarray:
    return arr.matvec_forward(x, t_now)


def matvec_backward(arr: CrossbarArray, delta, t_now: float) -> np.ndarray:
    return arr.matvec_backward(delta, t_now)


def effective_weights(arr: CrossbarArray, t_now: float, policy: str = "fresh") -> np.ndarray:
    return arr.effective_weights(t_now, policy)


def refresh(arr: CrossbarArray, policy: RefreshPolicy, t_now: float) -> RefreshReport:
    return arr.refresh(policy, t_now)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays: list[CrossbarArray], extra: dict | None = None,
                    dense: dict[str, np.ndarray] | None = None):
    """Write arrays to an ``.npz`` with a JSON header under the key ``header``.

    ``dense`` holds plain matrices (exact-mode weights); they come back in
    ``extra["dense"]`` on load.
    """
    from .io import atomic_path

    header = {"format": "mcasim-checkpoint", "version": CHECKPOINT_VERSION,
              "arrays": [a.header() for a in arrays], "extra": extra or {}}
    payload = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for k, a in enumerate(arrays):
        for name, v in a.state_arrays().items():
            payload[f"array{k}/{name}"] = v
    for name, v in (dense or {}).items():
        payload[f"dense/{name}"] = v
    with atomic_path(path) as tmp:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[list[CrossbarArray], dict]:
    with np.load(Path(path)) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("format") != "mcasim-checkpoint":
            raise CrossbarError(f"{path} is not a checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise CrossbarError(f"checkpoint version {header['version']} is newer than supported "
                                f"version {CHECKPOINT_VERSION}")
        arrays = []
        for k, h in enumerate(header["arrays"]):
            prefix = f"array{k}/"
            data = {name[len(prefix):]: z[name] for name in z.files if name.startswith(prefix)}
            arrays.append(CrossbarArray.from_state(h, data))
        shared = [a for a in arrays if a.scheme is Scheme.REFERENCE and a.reference == "network-mean"]
        if shared:
            ReferenceGroup(shared)
        extra = header["extra"]
        dense = {name[len("dense/"):]: z[name] for name in z.files if name.startswith("dense/")}
        if dense:
            extra["dense"] = dense
    return arrays, extra
