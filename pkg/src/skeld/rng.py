"""Counter-based Brownian increments.

Every (seed, replica, mode) triple owns an independent Philox stream whose
i-th normal is the increment of that mode on outer step i.  Consequences:

* a replica can be regenerated in isolation (parallel runs are trivially
  deterministic);
* modes 1..K are the same for every truncation K' >= K, and the same for
  every noise intensity, which gives common random numbers for free.

Refinements of a step (Brownian bridge draws) come from a second family of
streams addressed by (step, position in the bisection tree) through the
Philox counter.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK32 = (1 << 32) - 1
_MASK64 = (1 << 64) - 1


def _key(seed, replica, mode, salt):
    if not 0 <= seed <= _MASK64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    if not 0 <= replica <= _MASK32:
        raise ValueError("replica index must fit in 32 bits")
    if not 0 <= mode < (1 << 24):
        raise ValueError("mode index out of range")
    return (seed << 64) | (replica << 32) | (mode << 8) | salt


def mode_stream(seed, replica, mode):
    """Generator for the increments of one mode of one replica."""
    return np.random.Generator(np.random.Philox(key=_key(seed, replica, mode, 0)))


def step_normals(seed, replica, K, n_steps):
    """Array (K, n_steps) of standard normals; row k-1 is mode k."""
    out = np.empty((K, n_steps))
    for k in range(K):
        out[k] = mode_stream(seed, replica, k + 1).standard_normal(n_steps)
    return out


def bridge_normals(seed, replica, step, code, K):
    """K standard normals refining outer step ``step`` at bisection node ``code``."""
    counter = np.array([0, code & _MASK64, step & _MASK64, 0], dtype=np.uint64)
    bg = np.random.Philox(key=_key(seed, replica, 0, 1), counter=counter)
    return np.random.Generator(bg).standard_normal(K)


def brownian_bridge(dB, dt, z):
    """Split an increment over [0, dt] into its two halves given normals ``z``."""
    first = 0.5 * dB + 0.5 * np.sqrt(dt) * z
    return first, dB - first


def checksum(arr):
    """Short hex digest of an array's bytes (bitwise reproducibility checks)."""
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=float).tobytes()).hexdigest()[:16]
