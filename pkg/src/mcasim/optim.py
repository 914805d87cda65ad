"""Digital-unit optimizer: high-precision update accumulation and pulse transfer.

Weight updates are summed into ``chi`` at full precision.  Whenever an entry
reaches a device granularity (``eps_p`` upward, ``eps_d`` downward) it is
flushed as an integer number of blind programming pulses, truncated toward
zero, and ``chi`` keeps the remainder.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .crossbar import CrossbarArray, quantize_vector


class OptimError(ValueError):
    pass


@dataclass
class SparseUpdate:
    """Outer-product update ``value(i, j) = scale * a[k] * b[l]`` with
    ``i = rows[k]`` and ``j = cols[l]``.

    Only non-zero factors are stored, so every represented entry is non-zero.
    ``scale`` is the product of the shared scales and the learning rate.
    """

    rows: np.ndarray
    a: np.ndarray
    cols: np.ndarray
    b: np.ndarray
    scale: float
    s_x: float = 1.0
    s_delta: float = 1.0
    eta: float = 1.0

    @property
    def nnz(self) -> int:
        return self.rows.size * self.cols.size

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        ii, jj = np.meshgrid(self.rows, self.cols, indexing="ij")
        v = self.scale * np.multiply.outer(self.a, self.b)
        return ii.ravel(), jj.ravel(), v.ravel()

    def add_to(self, target: np.ndarray):
        """``target += dense(target.shape)`` without materializing the dense update."""
        if self.nnz:
            _accumulate_outer(target, np.zeros(target.shape[0], dtype=np.bool_), self.rows.astype(np.int64),
                              self.a.astype(float), self.cols.astype(np.int64), self.b.astype(float),
                              float(self.scale))

    def dense(self, shape) -> np.ndarray:
        out = np.zeros(shape)
        i, j, v = self.entries()
        out[i, j] = v
        return out


def compute_update_lowprec(x, delta, eta: float, bits: int | None = 3) -> SparseUpdate:
    """Outer product ``eta * x delta^T`` from ``bits``-wide signed codes.

    With ``bits=None`` the factors stay at full precision.
    """
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if eta <= 0:
        raise OptimError("eta must be > 0")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(delta))):
        raise OptimError("non-finite activation or error")
    if bits is None:
        rows = np.flatnonzero(x)
        cols = np.flatnonzero(delta)
        return SparseUpdate(rows, x[rows], cols, delta[cols], eta, eta=eta)
    qx = quantize_vector(x, bits)
    qd = quantize_vector(delta, bits)
    scale = eta * qx.scale * qd.scale
    rows = np.flatnonzero(qx.codes) if scale != 0 else np.zeros(0, dtype=np.int64)  # underflow
    cols = np.flatnonzero(qd.codes)
    return SparseUpdate(rows, qx.codes[rows].astype(float), cols, qd.codes[cols].astype(float),
                        scale, qx.scale, qd.scale, eta)


def sgd_momentum_step(velocity, grad, eta: float, mu: float):
    """``velocity <- mu * velocity + grad``; returns ``(velocity, -eta * velocity)``."""
    if not 0 <= mu < 1:
        raise OptimError("momentum must lie in [0, 1)")
    grad = np.asarray(grad, dtype=float)
    velocity = np.zeros_like(grad) if velocity is None else np.asarray(velocity, dtype=float)
    if velocity.shape != grad.shape:
        raise OptimError(f"velocity shape {velocity.shape} != gradient shape {grad.shape}")
    v = mu * velocity + grad
    return v, -eta * v


@dataclass
class PulseEvents:
    rows: np.ndarray
    cols: np.ndarray
    pulses: np.ndarray

    def __len__(self):
        return self.rows.size


@dataclass
class ChiAccumulator:
    chi: np.ndarray
    eps_p: float
    eps_d: float
    velocity: np.ndarray | None = None
    pulse_cap: int | None = None
    dirty: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.eps_p <= 0 or self.eps_d <= 0:
            raise OptimError("granularities must be > 0")
        self.chi = np.asarray(self.chi, dtype=float)
        if self.dirty is None:
            # rows that may hold entries beyond a granularity
            self.dirty = np.ones(self.chi.shape[0], dtype=bool)

    @classmethod
    def zeros(cls, shape, eps_p: float, eps_d: float | None = None, **kw) -> "ChiAccumulator":
        return cls(np.zeros(shape), eps_p, eps_p if eps_d is None else eps_d, **kw)

    @property
    def shape(self):
        return self.chi.shape


@numba.njit(cache=True)
def _accumulate_outer(chi, dirty, rows, a, cols, b, scale):
    for k in range(rows.shape[0]):
        i = rows[k]
        ak = scale * a[k]
        for m in range(cols.shape[0]):
            chi[i, cols[m]] += ak * b[m]
        dirty[i] = True


@numba.njit(cache=True)
def _flush_rows(chi, dirty, eps_p, eps_d, cap, out_r, out_c, out_p):
    n = 0
    rows, cols = chi.shape
    for i in range(rows):
        if not dirty[i]:
            continue
        dirty[i] = False
        for j in range(cols):
            c = chi[i, j]
            if c >= eps_p:
                p = np.int64(c / eps_p)
                # the division can round just below an integer
                while c - p * eps_p >= eps_p:
                    p += 1
                if cap > 0 and p > cap:
                    p = cap
                    dirty[i] = True
                chi[i, j] = c - p * eps_p
            elif c <= -eps_d:
                p = -np.int64(-c / eps_d)
                while c - p * eps_d <= -eps_d:
                    p -= 1
                if cap > 0 and -p > cap:
                    p = -cap
                    dirty[i] = True
                chi[i, j] = c - p * eps_d
            else:
                continue
            if p != 0:
                out_r[n] = i
                out_c[n] = j
                out_p[n] = p
                n += 1
    return n


def accumulate(acc: ChiAccumulator, upd) -> int:
    """Add an update into ``chi``; returns the number of chi-memory writes.

    ``upd`` is a ``SparseUpdate`` or a dense matrix of the accumulator's shape.
    """
    if isinstance(upd, SparseUpdate):
        if upd.nnz == 0:
            return 0
        if (upd.rows.max() >= acc.shape[0] or upd.cols.max() >= acc.shape[1]
                or upd.rows.min() < 0 or upd.cols.min() < 0):
            raise OptimError("update index out of range")
        _accumulate_outer(acc.chi, acc.dirty, upd.rows.astype(np.int64), upd.a.astype(float),
                          upd.cols.astype(np.int64), upd.b.astype(float), float(upd.scale))
        return upd.nnz
    upd = np.asarray(upd, dtype=float)
    if upd.shape != acc.shape:
        raise OptimError(f"update shape {upd.shape} != accumulator shape {acc.shape}")
    nz = upd != 0
    acc.chi += upd
    acc.dirty |= nz.any(axis=1)
    return int(nz.sum())


def pulses_due(acc: ChiAccumulator) -> PulseEvents:
    """Compute pulse counts and decrement ``chi`` without touching any device."""
    cap = 0 if acc.pulse_cap is None else int(acc.pulse_cap)
    n_dirty = int(acc.dirty.sum())
    size = n_dirty * acc.shape[1]
    out_r = np.empty(size, dtype=np.int64)
    out_c = np.empty(size, dtype=np.int64)
    out_p = np.empty(size, dtype=np.int64)
    n = _flush_rows(acc.chi, acc.dirty, float(acc.eps_p), float(acc.eps_d), cap, out_r, out_c, out_p)
    return PulseEvents(out_r[:n], out_c[:n], out_p[:n])


def flush(acc: ChiAccumulator, arr: CrossbarArray, t_now: float) -> PulseEvents:
    """Transfer whole granularities of ``chi`` to the array as blind pulses."""
    if acc.shape != (arr.rows, arr.cols):
        raise OptimError(f"accumulator shape {acc.shape} does not match array {(arr.rows, arr.cols)}")
    ev = pulses_due(acc)
    if len(ev):
        arr.program(ev.rows, ev.cols, ev.pulses, t_now)
    return ev
