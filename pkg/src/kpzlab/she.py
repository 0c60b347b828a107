"""Explicit finite-difference integrator for the stochastic heat equation.

    dZ = nu Z'' dt - (lambda/nu) sigma Z dW

on a uniform grid over [-X, X] with reflecting boundaries, started from
Z(0, x) = exp(B(x)) with B a two-sided random walk whose increments make
the slope field statistically stationary.  The physically meaningful
field is the log transform h = -(nu/lambda) log Z; all identity checks
live at the level of h increments, variances and covariances, where the
scheme's additive renormalization constant cancels.

Default normalization nu = lambda = 1/2, sigma = 1 (the exclusion-limit
convention); other parameter triples are reachable through
``rescale_params``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .rng import RngStream
from .stats import CheckRecord, bootstrap_stderr, compare

STABILITY_LIMIT = 0.25


@dataclass(frozen=True)
class SheParams:
    nu: float = 0.5
    lam: float = 0.5
    sigma: float = 1.0
    dx: float = 0.1
    dt: float = 0.0025
    half_width: float = 42.0
    t_end: float = 4.0

    def __post_init__(self):
        if self.nu <= 0 or self.lam <= 0:
            raise ValueError("nu and lambda must be positive")
        if self.dx <= 0 or self.dt <= 0:
            raise ValueError("dx and dt must be positive")
        if self.stability > STABILITY_LIMIT + 1e-12:
            raise ValueError(
                f"stability bound violated: nu dt / dx^2 = {self.stability:.4f} > 1/4"
            )
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")

    @property
    def stability(self) -> float:
        return self.nu * self.dt / self.dx**2

    @property
    def beta(self) -> float:
        """Noise coefficient (lambda / nu) sigma."""
        return self.lam / self.nu * self.sigma

    @property
    def ncells(self) -> int:
        return 2 * int(round(self.half_width / self.dx)) + 1

    @property
    def xs(self) -> np.ndarray:
        n = int(round(self.half_width / self.dx))
        return self.dx * np.arange(-n, n + 1)

    @property
    def slope_variance_rate(self) -> float:
        """Stationary variance per unit length of the log-field increments.

        The slope field's equilibrium is white noise balancing noise input
        against diffusive dissipation: Var(h(t,x+d) - h(t,x)) = rate * d
        with rate = sigma^2 / (2 nu).  At the default normalization the
        rate is 1.
        """
        return self.sigma**2 / (2.0 * self.nu)

    @property
    def b_variance_rate(self) -> float:
        """Increment variance rate of B(x) = log Z(0, x); equals the slope
        rate scaled back through h = -(nu/lambda) log Z."""
        return (self.lam / self.nu) ** 2 * self.slope_variance_rate

    def origin_index(self) -> int:
        return int(round(self.half_width / self.dx))

    def index_of(self, x: float) -> int:
        i = self.origin_index() + int(round(x / self.dx))
        if i < 0 or i >= self.ncells:
            raise ValueError(f"x = {x} outside grid")
        return i


@dataclass
class SheGrid:
    z: np.ndarray
    time: float
    negativity_flag: bool = False


@dataclass
class HopfColeField:
    h: np.ndarray


def brownian_initial(params: SheParams, stream: RngStream) -> SheGrid:
    """Z(0, x) = exp(B(x)) with B built outward from B(0) = 0.

    Increments are independent N(0, b_variance_rate * dx); the rate is the
    unique choice that makes the slope-field increments stationary under
    the dynamics, so the t = 0 ensemble already sits in equilibrium.
    """
    n = params.origin_index()
    steps = stream.generator.standard_normal(2 * n) * math.sqrt(
        params.b_variance_rate * params.dx
    )
    b = np.empty(params.ncells)
    b[n] = 0.0
    b[n + 1 :] = np.cumsum(steps[:n])
    b[:n] = -np.cumsum(steps[n:])[::-1]
    return SheGrid(z=np.exp(b), time=0.0)


def step(grid: SheGrid, params: SheParams, stream: RngStream) -> SheGrid:
    """One explicit update; see ``advance`` for multi-step evolution."""
    return advance(grid, params, stream, grid.time + params.dt)


def advance(grid: SheGrid, params: SheParams, stream: RngStream, t_end: float) -> SheGrid:
    """Integrate the field to ``t_end`` (a multiple of dt away).

    Per cell per step the noise increment is sigma_cell = sqrt(dt/dx), the
    discrete space-time white-noise normalization.  Any nonpositive
    updated cell sets the negativity flag and freezes the replica (it is
    excluded from statistics and counted).
    """
    if grid.negativity_flag:
        raise RuntimeError("replica flagged invalid (nonpositive field)")
    nsteps_f = (t_end - grid.time) / params.dt
    nsteps = int(round(nsteps_f))
    if nsteps < 0 or abs(nsteps_f - nsteps) > 1e-6:
        raise ValueError("t_end must be an integer number of steps ahead")
    alpha = params.stability
    noise_coef = params.beta * math.sqrt(params.dt / params.dx)
    chunk = max(1, min(nsteps, (1 << 21) // max(params.ncells, 1)))
    t_start = grid.time
    done = 0
    while done < nsteps:
        m = min(chunk, nsteps - done)
        if params.sigma == 0.0:
            _kernels.heat_steps(grid.z, m, alpha)
            steps_done, neg = m, 0
        else:
            noise = stream.generator.standard_normal((m, params.ncells))
            steps_done, neg = _kernels.she_steps(grid.z, m, alpha, noise_coef, noise)
        done += steps_done
        if neg:
            grid.negativity_flag = True
            grid.time = t_start + (done + 1) * params.dt  # clock at the failing step
            return grid
    grid.time = t_end
    return grid


def hopf_cole(grid: SheGrid, params: SheParams) -> HopfColeField:
    """h = -(nu/lambda) log Z, defined only for strictly positive fields."""
    if grid.negativity_flag or np.any(grid.z <= 0):
        raise ValueError("log transform undefined: nonpositive field values")
    return HopfColeField(h=-(params.nu / params.lam) * np.log(grid.z))


def current_mass(h0: HopfColeField, ht: HopfColeField):
    """The current field N(t,.) = h(t,.) - h(0,.), the mass field
    M(t,.) = h(t,.) - h(t,0), and M(0,.)."""
    if h0.h.shape != ht.h.shape:
        raise ValueError("grid mismatch between the two fields")
    origin = h0.h.shape[0] // 2
    n = ht.h - h0.h
    m_t = ht.h - ht.h[origin]
    m_0 = h0.h - h0.h[origin]
    return n, m_t, m_0


def conservation_residual(h0: HopfColeField, ht: HopfColeField) -> float:
    """max_x | (N(t,x) - N(t,0)) - (M(t,x) - M(0,x)) |; identically zero up
    to floating-point reassociation."""
    n, m_t, m_0 = current_mass(h0, ht)
    origin = n.shape[0] // 2
    return float(np.max(np.abs((n - n[origin]) - (m_t - m_0))))


def rescale_params(alpha: float, beta: float, gamma: float,
                   lam: float, nu: float, sigma: float) -> tuple[float, float, float]:
    """Coefficient map under h(t,x) -> gamma^-alpha h(gamma^-beta t, gamma^-1 x)."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    lam_g = gamma ** (alpha - beta + 2.0) * lam
    nu_g = gamma ** (-beta + 2.0) * nu
    sigma_g = gamma ** ((-beta + 1.0 - 2.0 * alpha) / 2.0) * sigma
    return lam_g, nu_g, sigma_g


# ---------------------------------------------------------------------------
# Ensemble identity checks
# ---------------------------------------------------------------------------


def cov_suite(
    h0_rows: np.ndarray,
    ht_rows: np.ndarray,
    params: SheParams,
    x_grid,
    k_tol: float = 3.0,
    nboot: int = 200,
    seed: int = 0,
) -> dict:
    """Variance/covariance identity report over an ensemble.

    Checks, per grid point x: Var(h(t,x)) - r|x| = Cov(N(t,0), N(t,x))
    with r the stationary increment rate (r = 1 at the default
    normalization), plus nonnegativity, decay of the covariance, and the
    x = 0 degeneracy Var(h(t,0)) = Var(N(t,0)).
    """
    nrep = h0_rows.shape[0]
    if nrep < 100:
        raise ValueError("cov_suite needs an ensemble of at least 100 replicas")
    r = params.slope_variance_rate
    i0 = params.origin_index()
    n_rows = ht_rows - h0_rows
    records: list[CheckRecord] = []
    profile = []
    for x in x_grid:
        i = params.index_of(x)
        h_x = ht_rows[:, i] - h0_rows[:, i0]  # h(t,x) with h(0,0) = 0 exactly
        lhs_minus = np.var(h_x, ddof=1) - r * abs(x)
        pair = np.stack([n_rows[:, i0], n_rows[:, i]], axis=1)
        cov = float(np.cov(pair[:, 0], pair[:, 1], ddof=1)[0, 1])

        def diff_stat(rows, _x=x):
            hh = rows[:, 2] - rows[:, 3]
            return float(np.var(hh, ddof=1) - r * abs(_x) - np.cov(rows[:, 0], rows[:, 1], ddof=1)[0, 1])

        stacked = np.stack([n_rows[:, i0], n_rows[:, i], ht_rows[:, i], h0_rows[:, i0]], axis=1)
        se = bootstrap_stderr(stacked, diff_stat, nboot=nboot, seed=seed + params.index_of(x))
        records.append(compare(f"var_minus_x_equals_cov[x={x}]", float(lhs_minus), cov, se, k_tol))
        se_excess = bootstrap_stderr(
            h_x, lambda v: float(np.var(v, ddof=1)), nboot=nboot,
            seed=seed + 7000 + params.index_of(x),
        )
        profile.append((float(x), float(lhs_minus), cov, se, se_excess))
    # decay: covariance indistinguishable from zero at |x| = 8 sqrt(t)
    t = params.t_end
    x_far = 8.0 * math.sqrt(params.t_end)
    i_far = params.index_of(min(x_far, params.half_width - params.dx))
    cov_far = float(np.cov(n_rows[:, i0], n_rows[:, i_far], ddof=1)[0, 1])
    se_far = bootstrap_stderr(
        np.stack([n_rows[:, i0], n_rows[:, i_far]], axis=1),
        lambda rows: float(np.cov(rows[:, 0], rows[:, 1], ddof=1)[0, 1]),
        nboot=nboot, seed=seed + 999,
    )
    records.append(compare(f"cov_decay_zero[x={x_far:.3g}]", cov_far, 0.0, se_far, k_tol))
    # x = 0 degeneracy: exact equality of the two variances
    var_h0 = float(np.var(ht_rows[:, i0] - h0_rows[:, i0], ddof=1))
    var_n0 = float(np.var(n_rows[:, i0], ddof=1))
    records.append(compare("var_h_equals_var_N_at_origin", var_h0, var_n0, 0.0, k_tol))
    # monotone decay of Var(h) - r|x| along increasing |x|, within error bars
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x40A0))))
    for side in (1.0, -1.0):
        ordered = sorted({abs(x) for x in x_grid if x != 0.0})
        prev = 0.0
        for ax in ordered:
            x1, x2 = side * prev, side * ax
            i1, i2 = params.index_of(x1), params.index_of(x2)
            e1 = ht_rows[:, i1] - h0_rows[:, i0]
            e2 = ht_rows[:, i2] - h0_rows[:, i0]
            diff = float(np.var(e2, ddof=1) - r * abs(x2)
                         - np.var(e1, ddof=1) + r * abs(x1))
            boots = np.empty(nboot)
            for b in range(nboot):
                idx = rng.integers(0, nrep, nrep)
                boots[b] = (np.var(e2[idx], ddof=1) - r * abs(x2)
                            - np.var(e1[idx], ddof=1) + r * abs(x1))
            se_d = float(boots.std(ddof=1))
            rec = compare(f"var_excess_monotone_she[{x2:g}]", diff, 0.0, se_d, k_tol)
            rec.passed = bool(diff <= k_tol * se_d)
            records.append(rec)
            prev = ax
    return {"records": records, "profile": profile, "t": t}


def increment_check(
    h_rows: np.ndarray, params: SheParams, delta: float,
    k_tol: float = 3.0, rtol: float = 0.05,
) -> dict:
    """Spatial-increment statistics of the log field at one time.

    The equilibrium increments are Gaussian with variance
    slope_variance_rate * delta; the check requires the matched
    normalization (rate 1) where the variance is delta itself, within the
    discretization tolerance plus the sampling CI.  Also checks whiteness
    through the sample correlation of two disjoint increments.
    """
    if abs(params.slope_variance_rate - 1.0) > 1e-12:
        raise ValueError("increment_check requires the nu=lambda=1/2, sigma=1 normalization")
    nd = int(round(delta / params.dx))
    if nd < 1:
        raise ValueError("delta must be at least one grid spacing")
    i0 = params.origin_index()
    inc1 = h_rows[:, i0 + nd] - h_rows[:, i0]
    inc2 = h_rows[:, i0] - h_rows[:, i0 - nd]
    var1 = float(np.var(inc1, ddof=1))
    se1 = bootstrap_stderr(inc1, lambda v: float(np.var(v, ddof=1)), nboot=200, seed=11)
    budget = rtol * delta + k_tol * se1
    corr = float(np.corrcoef(inc1, inc2)[0, 1])
    se_corr = 1.0 / math.sqrt(inc1.shape[0])
    return {
        "delta": delta,
        "variance": var1,
        "variance_stderr": se1,
        "variance_pass": bool(abs(var1 - delta) <= budget),
        "disjoint_corr": corr,
        "disjoint_corr_pass": bool(abs(corr) <= k_tol * se_corr),
    }


def heat_kernel_gaussian(x: np.ndarray, t: float, nu: float, width0: float) -> np.ndarray:
    """Closed-form heat evolution of exp(-x^2 / (2 w0^2)) under nu d^2/dx^2."""
    wt2 = width0**2 + 2.0 * nu * t
    return width0 / math.sqrt(wt2) * np.exp(-(x**2) / (2.0 * wt2))
