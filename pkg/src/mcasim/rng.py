"""Counter-based random streams.

Every stochastic quantity in the simulator is a pure function of
``(seed, stream, id, counter)``.  Nothing here carries state, so results do not
depend on the order in which devices are visited or on how work is split.

The mixer is SplitMix64's finalizer applied twice; uniforms are built from the
top 53 bits and Gaussians via Box-Muller.
"""
from __future__ import annotations

import functools
import hashlib
import math

import numba
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_C2 = np.uint64(0xD1B54A32D192ED03)

# named substreams; ablations change one at a time
SET_INCREMENT = "set-increment"
RESET_LEVEL = "reset-level"
DRIFT_EXPONENT = "drift-exponent"
READ_NOISE = "read-noise"
EVAL_READ_NOISE = "eval-read-noise"
INIT_TARGET = "init-target"
DATA_ORDER = "data-order"
NETWORK_INIT = "network-init"


@numba.njit(cache=True, inline="always")
def _mix(z):
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


_SCALE53 = 1.0 / 9007199254740992.0  # 2**-53


@numba.njit(cache=True, inline="always")
def _hashes(key, ident, counter):
    h = _mix(key ^ _mix(np.uint64(ident) * _GOLDEN + np.uint64(counter) * _C2))
    return h, _mix(h + _GOLDEN)


@numba.njit(cache=True, inline="always")
def uniform_pair1(key, ident, counter):
    """``(u1, u2)`` with u1 in (0, 1] and u2 in [0, 1)."""
    h, g = _hashes(key, ident, counter)
    return (np.float64(h >> np.uint64(11)) + 1.0) * _SCALE53, np.float64(g >> np.uint64(11)) * _SCALE53


@numba.njit(cache=True)
def normal1(key, ident, counter):
    """One standard normal deviate (Box-Muller) for ``(ident, counter)``."""
    u1, u2 = uniform_pair1(key, ident, counter)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@numba.njit(cache=True)
def _uniform_pair(key, ids, counters, u1, u2):
    for k in range(ids.shape[0]):
        u1[k], u2[k] = uniform_pair1(key, ids[k], counters[k])


@numba.njit(cache=True)
def _normal(key, ids, counters, out):
    for k in range(ids.shape[0]):
        out[k] = normal1(key, ids[k], counters[k])


@functools.lru_cache(maxsize=256)
def stream_key(seed: int, name: str) -> np.uint64:
    """Key for a named substream of a global seed."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return np.uint64(int.from_bytes(digest[:8], "little"))


def _prepare(ids, counters):
    ids, counters = np.broadcast_arrays(np.asarray(ids), np.asarray(counters))
    shape = ids.shape
    ids = np.array(ids, dtype=np.uint64).ravel()
    counters = np.array(counters, dtype=np.uint64).ravel()
    return ids, counters, shape


def uniform_pair(key, ids, counters) -> tuple[np.ndarray, np.ndarray]:
    ids, counters, shape = _prepare(ids, counters)
    u1 = np.empty(ids.shape[0])
    u2 = np.empty(ids.shape[0])
    _uniform_pair(np.uint64(key), ids, counters, u1, u2)
    return u1.reshape(shape), u2.reshape(shape)


def uniform(key, ids, counters) -> np.ndarray:
    """Uniform deviates on [0, 1)."""
    return uniform_pair(key, ids, counters)[1]


def normal(key, ids, counters) -> np.ndarray:
    """Standard normal deviates, one per (id, counter) pair."""
    ids, counters, shape = _prepare(ids, counters)
    out = np.empty(ids.shape[0])
    _normal(np.uint64(key), ids, counters, out)
    return out.reshape(shape)


def generator(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Sequential numpy generator for a named substream (shuffles, network init)."""
    key = int(stream_key(seed, name))
    return np.random.default_rng([key, *[int(e) for e in extra]])
