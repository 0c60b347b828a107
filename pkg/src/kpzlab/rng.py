"""Deterministic random-number streams for replica-parallel Monte Carlo.

Every replica owns one stream derived from ``(master_seed, stream_id)``.
Derivation is a pure function of those two integers, so the draw sequence
is identical no matter how many worker processes exist or in which order
tasks are scheduled.

A stream exposes two faces over the same identity:

* ``generator`` -- a ``numpy.random.Generator`` for vectorized draws
  (Bernoulli initial data, Gaussian noise fields),
* ``kernel_state`` -- a 4-word xoshiro256++ state consumed by the numba
  event kernels, seeded through a splitmix64 avalanche of the same pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    state = (state + _SPLITMIX_GAMMA) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    z = z ^ (z >> 31)
    return state, z


def _mix_seed_pair(master_seed: int, stream_id: int) -> int:
    """Avalanche-mix a (seed, stream) pair into a single 64-bit key."""
    s, a = _splitmix64(master_seed & _MASK64)
    s, b = _splitmix64((s ^ (stream_id & _MASK64)) & _MASK64)
    _, c = _splitmix64((a ^ b) & _MASK64)
    return c


def xoshiro_state(master_seed: int, stream_id: int, salt: int = 0) -> np.ndarray:
    """4-word xoshiro256++ state for the event kernels.

    The state is filled by chained splitmix64 outputs, the recommended
    seeding procedure for the xoshiro family.  ``salt`` separates multiple
    kernel streams hanging off one logical stream.
    """
    s = _mix_seed_pair(master_seed, stream_id) ^ (salt & _MASK64)
    out = np.empty(4, dtype=np.uint64)
    for i in range(4):
        s, z = _splitmix64(s)
        out[i] = z
    if not out.any():  # all-zero state is the one forbidden xoshiro state
        out[0] = _SPLITMIX_GAMMA
    return out


@dataclass
class RngStream:
    """Reproducible random stream owned by a single replica worker.

    Identical ``(master_seed, stream_id)`` pairs reproduce the identical
    draw sequence; distinct ``stream_id`` values give statistically
    independent streams.
    """

    master_seed: int
    stream_id: int
    _generator: np.random.Generator | None = field(default=None, repr=False)
    _kernel_state: np.ndarray | None = field(default=None, repr=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._generator is None:
            seq = np.random.SeedSequence((self.master_seed & _MASK64, self.stream_id & _MASK64))
            self._generator = np.random.Generator(np.random.PCG64(seq))
        return self._generator

    @property
    def kernel_state(self) -> np.ndarray:
        """Mutable xoshiro256++ state; event kernels advance it in place."""
        if self._kernel_state is None:
            self._kernel_state = xoshiro_state(self.master_seed, self.stream_id, salt=1)
        return self._kernel_state


def derive_stream(master_seed: int, stream_id: int) -> RngStream:
    """Derive the stream for one replica.

    Pure function of its arguments: stable across runs, platforms and
    worker counts.
    """
    return RngStream(master_seed=int(master_seed), stream_id=int(stream_id))
