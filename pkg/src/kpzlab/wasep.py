"""Weakly asymmetric simple exclusion on a finite segment.

Particles on sites -L..L attempt nearest-neighbour jumps, rightward at
rate p = 1/2 and leftward at rate q = 1/2 + sqrt(eps), with jumps onto
occupied sites suppressed and blocked boundaries (no jumps off the
segment ends).  The segment half-width follows a buffer rule that keeps
the observation window outside the boundary's influence cone.

The module also houses the height function, the rescaled height, the
discrete calculus helpers on the eps grid, and the particle-hole
reflection check on recorded trajectories.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .rng import RngStream
from .stats import closest_integer, discrete_abs  # noqa: F401  (re-exported, housed here)

P_RIGHT = 0.5


def left_rate(eps: float) -> float:
    return 0.5 + math.sqrt(eps)


def v_eps(eps: float) -> float:
    """Height-growth centering constant: eps^-3/2 / 2 - eps^-1/2 / 24."""
    return 0.5 * eps**-1.5 - eps**-0.5 / 24.0


def micro_time(eps: float, t_macro: float) -> float:
    """Macroscopic-to-microscopic time conversion T = eps^-2 t."""
    return t_macro / eps**2


def buffer_half_width(window_max: int, t_micro: float, eps: float, multiplier: float = 1.0) -> int:
    """Minimal lattice half-width for an observation window |x| <= window_max.

    Influence spreads at most ballistically, so a buffer of
    3 (p+q) T + 10 sqrt(T) sites makes the blocked boundary's effect on the
    window negligible.  ``multiplier`` scales the buffer portion for the
    doubling diagnostic.
    """
    rate = P_RIGHT + left_rate(eps)
    buf = math.ceil(3.0 * rate * t_micro * multiplier) + math.ceil(10.0 * math.sqrt(t_micro) * multiplier)
    return int(window_max + buf)


def discrete_laplacian(f, x: float, eps: float) -> float:
    """(1/2) eps^-2 (f(x+eps) - 2 f(x) + f(x-eps)) for a callable f."""
    return 0.5 * (f(x + eps) - 2.0 * f(x) + f(x - eps)) / eps**2


@dataclass(frozen=True)
class WasepParams:
    """Exclusion-process configuration.

    eps controls the asymmetry (q - p = sqrt(eps)); rho is the Bernoulli
    density; half_width L fixes the lattice sites -L..L; micro_horizon is
    the target microscopic time.
    """

    eps: float
    rho: float
    half_width: int
    micro_horizon: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.eps < 0.25:
            raise ValueError(f"eps must lie in (0, 1/4), got {self.eps}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.half_width < 1:
            raise ValueError("half_width must be a positive integer")
        if self.micro_horizon < 0:
            raise ValueError("micro_horizon must be nonnegative")

    @property
    def p(self) -> float:
        return P_RIGHT

    @property
    def q(self) -> float:
        return left_rate(self.eps)

    @property
    def nsites(self) -> int:
        return 2 * self.half_width + 1

    @property
    def nbonds(self) -> int:
        return 2 * self.half_width

    @property
    def total_rate(self) -> float:
        return (self.p + self.q) * self.nbonds


@dataclass
class LatticeState:
    """Occupation configuration eta(t, x) on sites -L..L."""

    occupation: np.ndarray  # uint8, index x + L
    micro_time: float
    half_width: int

    def site_index(self, x: int) -> int:
        if abs(x) > self.half_width:
            raise ValueError(f"site {x} outside lattice |x| <= {self.half_width}")
        return x + self.half_width

    def occupied(self, x: int) -> int:
        return int(self.occupation[self.site_index(x)])

    @property
    def particle_count(self) -> int:
        return int(self.occupation.sum())


@dataclass
class CurrentLedger:
    """Signed jump counters N(t, x) across bonds (x, x+1).

    Counters over all bonds are maintained by the kernel; only bonds named
    in ``monitored_bonds`` are part of the query contract.
    """

    monitored_bonds: frozenset[int]
    counts: np.ndarray  # int64 per internal bond index
    half_width: int

    @classmethod
    def create(cls, half_width: int, monitored_bonds) -> "CurrentLedger":
        mon = frozenset(int(x) for x in monitored_bonds)
        for x in mon:
            if not -half_width <= x <= half_width - 1:
                raise ValueError(f"bond ({x},{x + 1}) outside lattice")
        return cls(
            monitored_bonds=mon,
            counts=np.zeros(2 * half_width, dtype=np.int64),
            half_width=half_width,
        )

    def bond_index(self, x: int) -> int:
        return x + self.half_width

    def current(self, x: int) -> int:
        if x not in self.monitored_bonds:
            raise KeyError(f"bond ({x},{x + 1}) is not monitored")
        return int(self.counts[self.bond_index(x)])


@dataclass
class TrajectoryLog:
    """Ordered record of attempted events (for pathwise tests only)."""

    times: np.ndarray = field(default_factory=lambda: np.empty(0))
    bonds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))  # site coords
    dirs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint8))  # 1 = right
    execs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint8))

    def __len__(self) -> int:
        return self.times.shape[0]

    def validate(self) -> None:
        n = len(self)
        if not (self.bonds.shape[0] == self.dirs.shape[0] == self.execs.shape[0] == n):
            raise ValueError("malformed trajectory log: ragged arrays")
        if n > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("malformed trajectory log: times not strictly increasing")

    def to_csv_rows(self):
        """(event_index, time, bond, direction in {R, L}, executed in {0,1})."""
        for i in range(len(self)):
            yield (i, float(self.times[i]), int(self.bonds[i]),
                   "R" if self.dirs[i] else "L", int(self.execs[i]))

    def dump_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("event_index,time,bond,direction,executed\n")
            for row in self.to_csv_rows():
                fh.write(f"{row[0]},{row[1]!r},{row[2]},{row[3]},{row[4]}\n")


def init_bernoulli(
    params: WasepParams, stream: RngStream, condition_origin: str | None = None
) -> LatticeState:
    """i.i.d. Bernoulli(rho) occupations, optionally conditioning site 0.

    ``condition_origin`` in {"empty", "occupied"} forces the origin site
    regardless of the draw (used by the coupling initial states).
    """
    occ = (stream.generator.random(params.nsites) < params.rho).astype(np.uint8)
    if condition_origin is not None:
        if condition_origin not in ("empty", "occupied"):
            raise ValueError(f"unknown condition_origin {condition_origin!r}")
        occ[params.half_width] = 1 if condition_origin == "occupied" else 0
    return LatticeState(occupation=occ, micro_time=0.0, half_width=params.half_width)


def advance(
    params: WasepParams,
    state: LatticeState,
    ledger: CurrentLedger,
    stream: RngStream,
    t_end: float,
    log: TrajectoryLog | None = None,
) -> None:
    """Run the exclusion dynamics from the state's clock to ``t_end``.

    Uniformization: the state at t_end has the law of the exclusion
    process at t_end given its configuration at the current clock.
    Suppressed attempts (blocked target or boundary) are legal no-ops.
    """
    if t_end < state.micro_time:
        raise ValueError("cannot advance backwards in time")
    if t_end == state.micro_time:
        return
    p_ratio = params.p / (params.p + params.q)
    inv_lam = 1.0 / params.total_rate
    if log is None:
        _kernels.exclusion_advance(
            state.occupation, ledger.counts, stream.kernel_state,
            state.micro_time, t_end, p_ratio, inv_lam, params.nbonds,
        )
    else:
        _advance_logged(params, state, ledger, stream, t_end, log, p_ratio, inv_lam)
    state.micro_time = t_end


def _advance_logged(params, state, ledger, stream, t_end, log, p_ratio, inv_lam):
    cap = 1 << 16
    bufs = (np.empty(cap), np.empty(cap, dtype=np.int64),
            np.empty(cap, dtype=np.uint8), np.empty(cap, dtype=np.uint8))
    chunks = []
    t = state.micro_time
    while True:
        t, n, full = _kernels.exclusion_advance_logged(
            state.occupation, ledger.counts, stream.kernel_state,
            t, t_end, p_ratio, inv_lam, params.nbonds,
            bufs[0], bufs[1], bufs[2], bufs[3], 0,
        )
        chunks.append(tuple(b[:n].copy() for b in bufs))
        if not full:
            break
    times = np.concatenate([c[0] for c in chunks])
    bonds = np.concatenate([c[1] for c in chunks])
    dirs = np.concatenate([c[2] for c in chunks])
    execs = np.concatenate([c[3] for c in chunks])
    log.times = np.concatenate([log.times, times])
    log.bonds = np.concatenate([log.bonds, bonds - params.half_width])
    log.dirs = np.concatenate([log.dirs, dirs])
    log.execs = np.concatenate([log.execs, execs])


class Wasep:
    """One single-threaded exclusion engine owned by one replica worker."""

    def __init__(self, params: WasepParams, stream: RngStream, monitored_bonds=(0,),
                 condition_origin: str | None = None):
        self.params = params
        self.stream = stream
        self.state = init_bernoulli(params, stream, condition_origin)
        self.ledger = CurrentLedger.create(params.half_width, monitored_bonds)

    def advance(self, t_end: float, log: TrajectoryLog | None = None) -> None:
        advance(self.params, self.state, self.ledger, self.stream, t_end, log)

    def current(self, x: int) -> int:
        return self.ledger.current(x)

    def height(self, x: int) -> int:
        return height(self.state, self.ledger, x)

    def height_profile(self) -> np.ndarray:
        return height_profile(self.state, self.ledger)

    def scaled_height(self, t_macro: float, x_macro: float) -> float:
        return scaled_height(self.params, t_macro, x_macro, self.state, self.ledger)


def height(state: LatticeState, ledger: CurrentLedger, x: int) -> int:
    """Integrated height zeta(t, x) from occupations and the origin current.

    zeta(t,x) = sum_{0<y<=x} (2 eta - 1) - 2 N(t,0) for x > 0, the mirror
    sum for x < 0, and -2 N(t,0) at the origin.
    """
    if 0 not in ledger.monitored_bonds:
        raise KeyError("height requires the origin bond (0,1) to be monitored")
    L = state.half_width
    if abs(x) > L:
        raise ValueError(f"site {x} outside lattice")
    n0 = ledger.current(0)
    occ = state.occupation
    if x > 0:
        s = int(occ[L + 1 : L + x + 1].sum())
        return (2 * s - x) - 2 * n0
    if x < 0:
        s = int(occ[L + x + 1 : L + 1].sum())
        return -(2 * s - (-x)) - 2 * n0
    return -2 * n0


def height_profile(state: LatticeState, ledger: CurrentLedger) -> np.ndarray:
    """zeta(t, x) for every site x = -L..L (index x + L)."""
    if 0 not in ledger.monitored_bonds:
        raise KeyError("height requires the origin bond (0,1) to be monitored")
    L = state.half_width
    hat = 2 * state.occupation.astype(np.int64) - 1
    zeta = np.empty(2 * L + 1, dtype=np.int64)
    base = -2 * ledger.current(0)
    zeta[L] = base
    zeta[L + 1 :] = base + np.cumsum(hat[L + 1 :])
    zeta[:L] = base - np.cumsum(hat[1 : L + 1][::-1])[::-1]
    return zeta


def scaled_height(
    params: WasepParams, t_macro: float, x_macro: float,
    state: LatticeState, ledger: CurrentLedger,
) -> float:
    """h_eps(t,x) = sqrt(eps) (zeta(eps^-2 t, [x/eps]) - v_eps t).

    The state must already sit at micro time eps^-2 t.
    """
    eps = params.eps
    want = micro_time(eps, t_macro)
    if not math.isclose(state.micro_time, want, rel_tol=1e-12, abs_tol=1e-9):
        raise ValueError(
            f"state at micro time {state.micro_time}, expected eps^-2 t = {want}"
        )
    site = closest_integer(x_macro / eps)
    return math.sqrt(eps) * (height(state, ledger, site) - v_eps(eps) * t_macro)


def reflect_trajectory(log: TrajectoryLog, state0: LatticeState):
    """Particle-hole reflection of a recorded trajectory.

    The reflected process eta~(t,k) = 1 - eta(t,-k) is driven by the
    transformed event list (bond x -> -x-1, direction preserved).  Replays
    it, asserting every transformed attempt's exclusion outcome matches the
    recorded one, and checks the current identity N~(t,0) = N(t,-1)
    pathwise.  Returns (transformed_log, ok).
    """
    log.validate()
    L = state0.half_width
    occ_t = (1 - state0.occupation)[::-1].astype(np.uint8).copy()
    t_bonds_sites = -log.bonds - 1
    counts = np.zeros(2 * L, dtype=np.int64)
    internal = (t_bonds_sites + L).astype(np.int64)
    if internal.size and (internal.min() < 0 or internal.max() >= 2 * L):
        raise ValueError("malformed trajectory log: bond outside lattice")
    status = _kernels.replay_events(occ_t, counts, internal, log.dirs, log.execs)
    transformed = TrajectoryLog(
        times=log.times.copy(), bonds=t_bonds_sites.copy(),
        dirs=log.dirs.copy(), execs=log.execs.copy(),
    )
    if status != 0:
        return transformed, False
    n_tilde_0 = int(counts[L])  # bond (0,1) of the reflected process
    at_minus_1 = log.bonds == -1
    n_minus_1 = int(log.execs[at_minus_1 & (log.dirs == 1)].sum()) - int(
        log.execs[at_minus_1 & (log.dirs == 0)].sum()
    )
    return transformed, n_tilde_0 == n_minus_1
