"""Basic coupling of two exclusion processes with one discrepancy.

Both marginals share the same Poisson event clocks.  The pair is stored
as a single tri-state lattice (empty / first-class / second-class): the
upper process reads {first, second} as occupied, the lower process reads
only {first}.  The single second-class particle starts at the origin and
its displacement supplies the rescaled correlation histogram and the
displacement moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .rng import RngStream
from .stats import Histogram
from .wasep import LatticeState, WasepParams

EMPTY, FIRST_CLASS, SECOND_CLASS = 0, 1, 2
_GUARD = 2  # sites between the second-class particle and a declared boundary hit


def flux(rho: float, eps: float) -> float:
    """Macroscopic flux H_eps(rho) = -sqrt(eps) rho (1 - rho)."""
    _validate(rho, eps)
    return -math.sqrt(eps) * rho * (1.0 - rho)


def characteristic_speed(rho: float, eps: float) -> float:
    """H_eps'(rho) = -sqrt(eps)(1 - 2 rho); the second-class mean velocity."""
    _validate(rho, eps)
    return -math.sqrt(eps) * (1.0 - 2.0 * rho)


def _validate(rho: float, eps: float) -> None:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if not 0.0 < eps < 0.25:
        raise ValueError(f"eps must lie in (0, 1/4), got {eps}")


@dataclass
class CoupledPair:
    """Tri-state configuration with exactly one discrepancy."""

    tri_state: np.ndarray  # uint8, values {0,1,2}, index x + L
    second_class_pos: int  # site coordinate
    micro_time: float
    half_width: int
    invalid: bool = False

    def upper(self) -> LatticeState:
        """Collapse second-class -> particle: the upper marginal."""
        occ = (self.tri_state != EMPTY).astype(np.uint8)
        return LatticeState(occupation=occ, micro_time=self.micro_time,
                            half_width=self.half_width)

    def lower(self) -> LatticeState:
        """Collapse second-class -> empty: the lower marginal."""
        occ = (self.tri_state == FIRST_CLASS).astype(np.uint8)
        return LatticeState(occupation=occ, micro_time=self.micro_time,
                            half_width=self.half_width)


@dataclass
class DisplacementSample:
    """Second-class displacement at one microscopic time."""

    t_micro: float
    position: int
    centered: float  # position - V^rho_eps * t_micro

    @classmethod
    def at(cls, pair: CoupledPair, params: WasepParams) -> "DisplacementSample":
        v = characteristic_speed(params.rho, params.eps)
        return cls(
            t_micro=pair.micro_time,
            position=pair.second_class_pos,
            centered=pair.second_class_pos - v * pair.micro_time,
        )


def init_discrepancy(params: WasepParams, stream: RngStream) -> CoupledPair:
    """Second-class particle at the origin, Bernoulli(rho) first-class elsewhere."""
    tri = (stream.generator.random(params.nsites) < params.rho).astype(np.uint8)
    tri[params.half_width] = SECOND_CLASS
    return CoupledPair(
        tri_state=tri, second_class_pos=0, micro_time=0.0,
        half_width=params.half_width,
    )


def advance_coupled(
    pair: CoupledPair, params: WasepParams, stream: RngStream, t_end: float
) -> CoupledPair:
    """Advance both marginals to ``t_end`` under the shared event sequence.

    First-class particles move with priority; the discrepancy is displaced
    by first-class particles jumping onto it and hops into adjacent holes
    at its own (p, q) rates.  If it reaches the guard band at the lattice
    edge the replica is flagged invalid (and excluded from statistics).
    """
    if t_end < pair.micro_time:
        raise ValueError("cannot advance backwards in time")
    if pair.invalid:
        raise RuntimeError("replica flagged invalid (second-class boundary hit)")
    if t_end == pair.micro_time:
        return pair
    L = pair.half_width
    p_ratio = params.p / (params.p + params.q)
    inv_lam = 1.0 / params.total_rate
    _, sc_internal, invalid = _kernels.coupled_advance(
        pair.tri_state, stream.kernel_state, pair.micro_time, t_end,
        p_ratio, inv_lam, params.nbonds,
        pair.second_class_pos + L, _GUARD, 2 * L - _GUARD,
    )
    pair.second_class_pos = int(sc_internal) - L
    pair.micro_time = t_end
    pair.invalid = bool(invalid)
    return pair


def displacement_moment(samples, m: float) -> tuple[float, float]:
    """(mean, stderr) of |centered displacement|^m over replicas."""
    if m < 1:
        raise ValueError("moment order must be >= 1")
    if len(samples) == 0:
        raise ValueError("empty sample set")
    ts = {s.t_micro for s in samples}
    if len(ts) > 1:
        raise ValueError("samples must share a common time")
    vals = np.array([abs(s.centered) ** m for s in samples])
    est = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return est, stderr


def estimate_S(samples, eps: float, t_macro: float, rho: float = 0.5) -> Histogram:
    """Empirical rescaled correlation density from second-class positions.

    Bins of width eps centered on eps * Z; bin mass / eps is the density
    value.  The identity behind the estimator holds at density 1/2 only,
    so other densities are refused.
    """
    if rho != 0.5:
        raise ValueError("the correlation identity requires density 1/2")
    want = t_macro / eps**2
    for s in samples:
        if not math.isclose(s.t_micro, want, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError("samples not taken at micro time eps^-2 t")
    sites = np.array([s.position for s in samples], dtype=np.int64)
    return Histogram.from_sites(sites, eps)
