"""Streaming statistics, histograms and identity checks.

All estimators here are pure functions over immutable inputs (or mergeable
value objects), so they can be moved freely between workers and merged in
replica order for bitwise-deterministic results.

Error bars follow two conventions:

* means use replica batching (>= 30 contiguous batches),
* variance-, covariance- and histogram-valued functionals use a bootstrap
  over replicas.

Comparisons are expressed as ``CheckRecord`` rows with a combined standard
error and a z-score; "pass" means ``|z| <= k`` (k = 3 unless configured).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

DEFAULT_TOLERANCE_K = 3.0
DEFAULT_BOOTSTRAP = 200
MIN_BATCHES = 30


# ---------------------------------------------------------------------------
# Streaming moments
# ---------------------------------------------------------------------------


@dataclass
class MomentAccumulator:
    """One-pass mean/variance accumulator (Welford update, Chan merge)."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def accumulate(self, value: float) -> "MomentAccumulator":
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)
        return self

    def extend(self, values: Sequence[float]) -> "MomentAccumulator":
        for v in values:
            self.accumulate(float(v))
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean, self.m2 = other.count, other.mean, other.m2
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.mean += delta * other.count / n
        self.m2 += other.m2 + delta * delta * self.count * other.count / n
        self.count = n
        return self

    @property
    def variance(self) -> float | None:
        """Unbiased sample variance; absent below two observations."""
        if self.count < 2:
            return None
        return self.m2 / (self.count - 1)

    @property
    def stderr_of_mean(self) -> float | None:
        var = self.variance
        if var is None:
            return None
        return math.sqrt(var / self.count)


def batch_stderr(values: np.ndarray, nbatches: int = MIN_BATCHES) -> float:
    """Standard error of the mean by contiguous replica batching."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n < 2:
        return float("nan")
    nbatches = min(nbatches, n)
    edges = np.linspace(0, n, nbatches + 1).astype(int)
    means = np.array([values[a:b].mean() for a, b in zip(edges[:-1], edges[1:])])
    return float(means.std(ddof=1) / math.sqrt(nbatches))


def bootstrap_stderr(
    values: np.ndarray,
    statistic: Callable[[np.ndarray], float],
    nboot: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
) -> float:
    """Bootstrap standard error of ``statistic`` over replica resamples."""
    values = np.asarray(values)
    n = values.shape[0]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xB007))))
    stats = np.empty(nboot)
    for b in range(nboot):
        idx = rng.integers(0, n, n)
        stats[b] = statistic(values[idx])
    return float(stats.std(ddof=1))


# ---------------------------------------------------------------------------
# Histograms on the epsilon grid
# ---------------------------------------------------------------------------


@dataclass
class Histogram:
    """Probability histogram with bins of width ``eps`` centered on eps*Z.

    Bin k covers macroscopic positions in eps*(k-1/2, k+1/2]; microscopic
    integer samples map one-to-one onto bins.
    """

    eps: float
    kmin: int
    counts: np.ndarray  # int64 counts per bin
    total: int

    @classmethod
    def from_sites(cls, sites: np.ndarray, eps: float) -> "Histogram":
        sites = np.asarray(sites, dtype=np.int64)
        if sites.size == 0:
            raise ValueError("empty sample set")
        kmin = int(sites.min())
        counts = np.bincount(sites - kmin)
        return cls(eps=eps, kmin=kmin, counts=counts.astype(np.int64), total=int(sites.size))

    @property
    def ks(self) -> np.ndarray:
        return np.arange(self.kmin, self.kmin + self.counts.size)

    @property
    def centers(self) -> np.ndarray:
        return self.eps * self.ks

    @property
    def mass(self) -> np.ndarray:
        """Probability mass per bin; sums to 1 exactly (up to counting)."""
        return self.counts / self.total

    @property
    def density(self) -> np.ndarray:
        """Macroscopic density values: bin mass / eps."""
        return self.mass / self.eps

    def mass_at(self, k: int) -> float:
        i = k - self.kmin
        if i < 0 or i >= self.counts.size:
            return 0.0
        return float(self.counts[i]) / self.total

    def reflected(self) -> "Histogram":
        return Histogram(
            eps=self.eps,
            kmin=-(self.kmin + self.counts.size - 1),
            counts=self.counts[::-1].copy(),
            total=self.total,
        )

    def tv_distance(self, other: "Histogram") -> float:
        """Total-variation distance between two bin-aligned histograms."""
        if other.eps != self.eps:
            raise ValueError("bin width mismatch")
        lo = min(self.kmin, other.kmin)
        hi = max(self.kmin + self.counts.size, other.kmin + other.counts.size)
        a = np.zeros(hi - lo)
        b = np.zeros(hi - lo)
        a[self.kmin - lo : self.kmin - lo + self.counts.size] = self.mass
        b[other.kmin - lo : other.kmin - lo + other.counts.size] = other.mass
        return 0.5 * float(np.abs(a - b).sum())


def closest_integer(x: float) -> int:
    """The closest-integer map floor(x + 1/2)."""
    return int(math.floor(x + 0.5))


def discrete_abs(x: float, eps: float) -> float:
    """|x| quantized to the eps grid: |eps * [x/eps]|."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return abs(eps * closest_integer(x / eps))


def moment_of_histogram(h: Histogram, m: float, eps: float | None = None) -> float:
    """m-th absolute moment of the histogram in macroscopic units."""
    if m < 0:
        raise ValueError("moment order must be nonnegative")
    eps = h.eps if eps is None else eps
    grid_abs = np.abs(eps * h.ks)
    return float((grid_abs**m * h.mass).sum())


def diffusivity(t: float, h: Histogram) -> float:
    """Second moment of the histogram divided by t."""
    if t <= 0:
        raise ValueError("diffusivity requires t > 0")
    return moment_of_histogram(h, 2.0) / t


def tv_symmetry_check(
    sites: np.ndarray, eps: float, nboot: int = DEFAULT_BOOTSTRAP, seed: int = 0
) -> dict:
    """Total-variation distance between a histogram and its reflection,
    compared against the sign-flip null.

    Under the symmetry hypothesis each sample is equally likely at +k and
    -k, so flipping signs independently regenerates the null ensemble.  The
    observed TV must stay below the null mean plus three null standard
    deviations.
    """
    sites = np.asarray(sites, dtype=np.int64)
    h = Histogram.from_sites(sites, eps)
    tv = h.tv_distance(h.reflected())
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0x7F1B))))
    null = np.empty(nboot)
    for b in range(nboot):
        flips = rng.integers(0, 2, sites.size) * 2 - 1
        hb = Histogram.from_sites(sites * flips, eps)
        null[b] = hb.tv_distance(hb.reflected())
    null_mean = float(null.mean())
    null_sd = float(null.std(ddof=1))
    return {
        "tv": tv,
        "null_mean": null_mean,
        "null_sd": null_sd,
        "threshold": null_mean + 3.0 * null_sd,
        "pass": bool(tv <= null_mean + 3.0 * null_sd),
    }


# ---------------------------------------------------------------------------
# Log-log exponent fits
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    slope: float
    intercept: float
    slope_stderr: float
    r_squared: float
    t_range: tuple[float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t_range"] = list(self.t_range)
        return d


def fit_exponent(points: Sequence[tuple[float, float, float]], weighted: bool = False) -> FitResult:
    """Least-squares slope of log y against log t.

    ``points`` are (t, y, y_stderr) rows; y must be positive.  The slope
    standard error comes from the fit residuals (or from the propagated
    log-errors in the weighted variant).
    """
    if len(points) < 3:
        raise ValueError("need at least 3 points to fit an exponent")
    t = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)
    se = np.array([p[2] for p in points], dtype=float)
    if np.any(y <= 0) or np.any(t <= 0):
        raise ValueError("log-log fit requires positive t and y")
    x = np.log(t)
    ly = np.log(y)
    if weighted:
        w = (y / np.where(se > 0, se, np.inf)) ** 2  # var(log y) ~ (se/y)^2
        w = np.where(np.isfinite(w), w, np.max(w[np.isfinite(w)], initial=1.0))
    else:
        w = np.ones_like(x)
    sw = w.sum()
    xbar = (w * x).sum() / sw
    ybar = (w * ly).sum() / sw
    sxx = (w * (x - xbar) ** 2).sum()
    slope = (w * (x - xbar) * (ly - ybar)).sum() / sxx
    intercept = ybar - slope * xbar
    resid = ly - (intercept + slope * x)
    dof = len(points) - 2
    sigma2 = (w * resid**2).sum() / dof
    slope_stderr = math.sqrt(sigma2 / sxx)
    ss_tot = (w * (ly - ybar) ** 2).sum()
    r_squared = 1.0 - (w * resid**2).sum() / ss_tot if ss_tot > 0 else 1.0
    return FitResult(
        slope=float(slope),
        intercept=float(intercept),
        slope_stderr=float(slope_stderr),
        r_squared=float(r_squared),
        t_range=(float(t.min()), float(t.max())),
    )


# ---------------------------------------------------------------------------
# Variance-profile identities
# ---------------------------------------------------------------------------


def discrete_laplacian_grid(values: np.ndarray, eps: float) -> np.ndarray:
    """(1/2) eps^-2 second difference of a profile sampled on the eps grid.

    Returns an array two entries shorter (interior points only).
    """
    v = np.asarray(values, dtype=float)
    return 0.5 * (v[2:] - 2.0 * v[1:-1] + v[:-2]) / eps**2


def reconstruct_var_from_S(x: float, h: Histogram) -> float:
    """Height variance at macroscopic x reconstructed from the correlation
    histogram: |x|_eps + 2 * sum_{z > |x|} (z - |x|_eps) S(z).

    Exact for the lattice law when x sits on the eps grid.
    """
    if abs(float(h.mass.sum()) - 1.0) > 1e-12:
        raise ValueError("histogram is not normalized")
    eps = h.eps
    kx = closest_integer(abs(x) / eps)
    ks = h.ks
    tail = ks > kx
    return eps * kx + 2.0 * float(((ks[tail] - kx) * eps * h.mass[tail]).sum())


def weighted_var_integral(
    sites: np.ndarray,
    var_values: np.ndarray,
    m: float,
    eps: float,
    decay_rtol: float = 0.05,
    noise_floor: float = 0.0,
    edge_band: int = 5,
) -> float:
    """The integral sum_x Delta_eps(|x|_eps^m) [Var - |x|_eps] eps over the
    sampled profile.

    ``sites`` are integer lattice sites k (macroscopic position eps*k) and
    ``var_values`` the matching Var(h(t, eps*k)) samples.  The profile must
    have decayed at the window edge, otherwise the discarded boundary terms
    of the summation by parts are not negligible; ``noise_floor`` is the
    caller's allowance for pure sampling noise in the edge band (e.g. three
    standard errors of the band mean).
    """
    sites = np.asarray(sites, dtype=np.int64)
    v = np.asarray(var_values, dtype=float)
    if sites.size != v.size or sites.size < 3:
        raise ValueError("need matching site/variance arrays of length >= 3")
    order = np.argsort(sites)
    sites, v = sites[order], v[order]
    if np.any(np.diff(sites) != 1):
        raise ValueError("profile must cover consecutive lattice sites")
    excess = v - eps * np.abs(sites)
    interior_peak = float(np.max(np.abs(excess)))
    band = min(edge_band, max(1, sites.size // 4))
    edge = max(abs(float(excess[:band].mean())), abs(float(excess[-band:].mean())))
    if interior_peak > 0 and edge > decay_rtol * interior_peak + noise_floor:
        raise ValueError(
            f"variance profile not decayed at window edge "
            f"(edge {edge:.3g} vs peak {interior_peak:.3g}); enlarge the buffer"
        )
    k = sites.astype(float)
    lap_weight = 0.5 * eps ** (m - 2.0) * (
        np.abs(k + 1) ** m - 2.0 * np.abs(k) ** m + np.abs(k - 1) ** m
    )
    return float((lap_weight * excess * eps).sum())


@dataclass
class CheckRecord:
    """One identity comparison in the report JSON schema."""

    check_name: str
    lhs: float
    rhs: float
    combined_stderr: float
    z_score: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "check_name": self.check_name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "combined_stderr": self.combined_stderr,
            "z_score": self.z_score,
            "pass": self.passed,
        }


def compare(
    name: str, lhs: float, rhs: float, stderr: float, k: float = DEFAULT_TOLERANCE_K
) -> CheckRecord:
    """Build a CheckRecord for lhs == rhs with the given combined stderr."""
    if stderr > 0:
        z = (lhs - rhs) / stderr
    else:
        z = 0.0 if lhs == rhs else math.inf
    return CheckRecord(
        check_name=name,
        lhs=float(lhs),
        rhs=float(rhs),
        combined_stderr=float(stderr),
        z_score=float(z),
        passed=bool(abs(z) <= k),
    )


def identity_laplacian(
    var_sites: np.ndarray,
    var_values: np.ndarray,
    var_boot: np.ndarray,
    hist: Histogram,
    eps: float,
    check_ks: Sequence[int],
    k_tol: float = DEFAULT_TOLERANCE_K,
) -> list[CheckRecord]:
    """Per-bin comparison of the correlation density against the discrete
    Laplacian of the height-variance profile.

    ``var_boot`` holds bootstrap resamples of the variance profile (one row
    per resample) so that the Laplacian's error bars inherit the cross-site
    correlations.  The histogram side comes from an independent replica set
    with binomial errors.
    """
    var_sites = np.asarray(var_sites, dtype=np.int64)
    lookup = {int(s): i for i, s in enumerate(var_sites)}
    records = []
    for k in check_ks:
        if not all(k + d in lookup for d in (-1, 0, 1)):
            continue
        im, i0, ip = lookup[k - 1], lookup[k], lookup[k + 1]
        lap = 0.5 * (var_values[ip] - 2 * var_values[i0] + var_values[im]) / eps**2
        lap_boot = 0.5 * (var_boot[:, ip] - 2 * var_boot[:, i0] + var_boot[:, im]) / eps**2
        se_lap = float(lap_boot.std(ddof=1))
        p = hist.mass_at(k)
        s_val = p / eps
        se_s = math.sqrt(max(p * (1 - p), 0.0) / hist.total) / eps
        se = math.sqrt(se_lap**2 + se_s**2)
        records.append(compare(f"laplacian_identity[k={k}]", s_val, float(lap), se, k_tol))
    return records
