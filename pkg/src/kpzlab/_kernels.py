"""Numba kernels for the uniformized event loops and the SHE integrator.

The exclusion dynamics are realized by uniformization: candidate events
arrive as a Poisson stream at constant total rate Lambda = (p+q) * nbonds,
each event picks a uniform bond and a direction (right with probability
p/(p+q)), and executes iff the exclusion rule permits.  Event randomness
comes from an in-kernel xoshiro256++ generator so the hot loop never
touches memory for random numbers; time is accumulated as exact
exponential increments in double precision, and an event generated past
the horizon is discarded before being applied.

All kernels mutate their state arrays in place and are single-threaded;
parallelism only ever happens across replicas.
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint64

_INV53 = 1.1102230246251565e-16  # 2^-53
_HALF54 = 5.551115123125783e-17  # 2^-54, keeps the time uniform away from 0


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << k) | (x >> (uint64(64) - k))


@njit(cache=True, inline="always")
def _next_u64(s):
    """xoshiro256++ step on a 4-word state array."""
    r = _rotl(s[0] + s[3], uint64(23)) + s[0]
    t = s[1] << uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], uint64(45))
    return r


@njit(cache=True)
def kernel_uniforms(state, out):
    """Fill ``out`` with uniforms from the kernel generator (for tests)."""
    for i in range(out.shape[0]):
        out[i] = (_next_u64(state) >> uint64(11)) * _INV53


@njit(cache=True)
def exclusion_advance(occ, counts, state, t, t_end, p_ratio, inv_lam, nbonds):
    """Advance a plain exclusion lattice to time ``t_end``.

    occ     -- uint8 occupations, sites 0..nsites-1 (blocked boundaries)
    counts  -- int64 signed currents per bond b = (site b, site b+1)
    state   -- xoshiro256++ state, mutated in place
    Returns the time of the last applied event (call sites then set the
    lattice clock to t_end; the discarded overshoot increment is legal by
    memorylessness).
    """
    while True:
        u1 = (_next_u64(state) >> uint64(11)) * _INV53 + _HALF54
        t_next = t - np.log(u1) * inv_lam
        if t_next > t_end:
            return t
        v = ((_next_u64(state) >> uint64(11)) * _INV53) * nbonds
        b = int(v)
        d = 1 if v - b < p_ratio else 0  # 1 = rightward attempt
        src = b + 1 - d
        dst = b + d
        m = occ[src] & (1 - occ[dst])
        occ[src] -= m
        occ[dst] += m
        counts[b] += m * (2 * d - 1)
        t = t_next


@njit(cache=True)
def exclusion_advance_logged(
    occ, counts, state, t, t_end, p_ratio, inv_lam, nbonds,
    log_t, log_bond, log_dir, log_exec, log_len,
):
    """Logged variant of ``exclusion_advance`` recording every attempt.

    Consumes randomness in the identical order as the unlogged kernel.
    Returns (t, new_log_len, full) where full=1 means the log buffers ran
    out and the caller must grow them and call again.
    """
    cap = log_t.shape[0]
    n = log_len
    while True:
        if n >= cap:
            return t, n, 1
        u1 = (_next_u64(state) >> uint64(11)) * _INV53 + _HALF54
        t_next = t - np.log(u1) * inv_lam
        if t_next > t_end:
            return t, n, 0
        v = ((_next_u64(state) >> uint64(11)) * _INV53) * nbonds
        b = int(v)
        d = 1 if v - b < p_ratio else 0
        src = b + 1 - d
        dst = b + d
        m = occ[src] & (1 - occ[dst])
        occ[src] -= m
        occ[dst] += m
        counts[b] += m * (2 * d - 1)
        log_t[n] = t_next
        log_bond[n] = b
        log_dir[n] = d
        log_exec[n] = m
        n += 1
        t = t_next


@njit(cache=True)
def replay_events(occ, counts, bonds, dirs, execs):
    """Re-apply a recorded event list to a lattice (pathwise oracle).

    Returns 0 on success, or 1 + the index of the first event whose
    recorded execution flag disagrees with the exclusion rule.
    """
    for i in range(bonds.shape[0]):
        b = bonds[i]
        d = dirs[i]
        src = b + 1 - d
        dst = b + d
        m = occ[src] & (1 - occ[dst])
        if m != execs[i]:
            return 1 + i
        occ[src] -= m
        occ[dst] += m
        counts[b] += m * (2 * d - 1)
    return 0


# Tri-state coupled lattice: 0 empty, 1 first-class, 2 second-class.
# A jump src -> dst realizes the basic coupling of the two marginals
# (upper process occupies {1,2}, lower process occupies {1}):
#   (1,0) -> (0,1)   first-class particle moves in both processes
#   (2,0) -> (0,2)   discrepancy moves (upper-only move)
#   (1,2) -> (2,1)   first-class jumps onto the discrepancy (lower-only
#                    move); the discrepancy is displaced backwards
#   anything else    no change
_CODE_NEWSRC = np.array([0, 0, 0, 0, 1, 2, 0, 2, 2], dtype=np.uint8)
_CODE_NEWDST = np.array([0, 1, 2, 1, 1, 1, 2, 1, 2], dtype=np.uint8)
_CODE_SC_SRC = np.array([0, 0, 0, 0, 0, 1, 0, 0, 0], dtype=np.int64)
_CODE_SC_DST = np.array([0, 0, 0, 0, 0, 0, 1, 0, 0], dtype=np.int64)


@njit(cache=True)
def coupled_advance(occ3, state, t, t_end, p_ratio, inv_lam, nbonds, scpos, lo_guard, hi_guard):
    """Advance the coupled pair to ``t_end`` under shared event randomness.

    Returns (t_last_event, scpos, invalid) with invalid=1 if the
    second-class particle touched the guard band near the lattice edge.
    """
    while True:
        u1 = (_next_u64(state) >> uint64(11)) * _INV53 + _HALF54
        t_next = t - np.log(u1) * inv_lam
        if t_next > t_end:
            return t, scpos, 0
        v = ((_next_u64(state) >> uint64(11)) * _INV53) * nbonds
        b = int(v)
        d = 1 if v - b < p_ratio else 0
        src = b + 1 - d
        dst = b + d
        code = occ3[src] * 3 + occ3[dst]
        occ3[src] = _CODE_NEWSRC[code]
        occ3[dst] = _CODE_NEWDST[code]
        if _CODE_SC_SRC[code] or _CODE_SC_DST[code]:
            scpos = src if _CODE_SC_SRC[code] else dst
            if scpos <= lo_guard or scpos >= hi_guard:
                return t_next, scpos, 1
        t = t_next


@njit(cache=True)
def she_steps(z, nsteps, alpha, noise_coef, noise):
    """Explicit Euler-Maruyama steps for the stochastic heat equation.

    z          -- positive field on the grid, updated in place
    alpha      -- nu * dt / dx^2 (must satisfy the stability bound)
    noise_coef -- (lambda/nu) * sigma * sqrt(dt / dx)
    noise      -- standard normals, shape (nsteps, ncells)
    Boundaries are reflecting (zero flux).  Returns (steps_done, negative)
    where negative=1 means some updated cell went nonpositive; the step
    that produced it is not counted as done.
    """
    ncells = z.shape[0]
    for s in range(nsteps):
        left = z[0]  # reflecting ghost equals the old boundary value
        cur = z[0]
        neg = False
        for j in range(ncells):
            right = z[j + 1] if j + 1 < ncells else cur
            new = cur + alpha * (left - 2.0 * cur + right) - noise_coef * cur * noise[s, j]
            z[j] = new
            if new <= 0.0:
                neg = True
            left = cur
            cur = right
        if neg:
            return s, 1
    return nsteps, 0


@njit(cache=True)
def heat_steps(z, nsteps, alpha):
    """Noiseless explicit heat steps with reflecting boundaries."""
    ncells = z.shape[0]
    for _ in range(nsteps):
        left = z[0]
        cur = z[0]
        for j in range(ncells):
            right = z[j + 1] if j + 1 < ncells else cur
            z[j] = cur + alpha * (left - 2.0 * cur + right)
            left = cur
            cur = right
    return nsteps
