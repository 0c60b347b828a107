"""Experiment orchestration: deterministic replica farming and estimators.

Each experiment kind maps replica indices onto disjoint stream-id ranges,
runs one engine instance per replica (embarrassingly parallel), merges
per-replica results in ascending replica order and aggregates them into
sweep rows, histograms and identity-check records.  The output of a run
is a pure function of (config, master_seed), independent of the worker
count.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import __version__ as TOOL_VERSION
from . import coupling, she, stats, wasep
from .rng import derive_stream

KINDS = ("wasep-height", "second-class", "she", "identity-suite", "exponent-sweep")

# stream-id bases keep every ensemble on its own independent id range
PLAIN_SWEEP_BASE = 1 << 32
COUPLED_SWEEP_BASE = 2 << 32
IDENT_PLAIN_BASE = 3 << 32
IDENT_COUPLED_BASE = 4 << 32
QSPEED_BASE = 5 << 32  # + density index << 28
JQ_PLAIN_BASE = 6 << 32
JQ_COUPLED_BASE = 7 << 32
SHE_BASE = 8 << 32
DIAG_BASE = 9 << 32
CONS_BASE = 10 << 32

_QSPEED_TOLERANCE_K = 4.0  # the mean-speed identity is checked at 4 stderr
_MEAN_HEIGHT_TOLERANCE_K = 4.0


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class BufferRuleError(ValueError):
    """Engine override violates the buffer rule (CLI exit code 3)."""


@dataclass
class ExperimentConfig:
    kind: str
    eps: float = 0.2
    rho: float = 0.5
    t_grid: tuple = (8.0, 16.0, 32.0, 64.0, 128.0)
    replicas: int = 500
    master_seed: int = 42
    workers: int = 1
    output_dir: str = "."
    tolerance_k: float = 3.0
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in raw:
            raise ConfigError("config must name an experiment kind")
        cfg = cls(**{k: raw[k] for k in raw})
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if not 0.0 < self.eps < 0.25:
            raise ConfigError("eps must lie in (0, 1/4)")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if self.replicas < 1:
            raise ConfigError("replicas must be a positive integer")
        if self.workers < 1:
            raise ConfigError("workers must be a positive integer")
        if self.tolerance_k <= 0:
            raise ConfigError("tolerance_k must be positive")
        self.t_grid = tuple(float(t) for t in self.t_grid)
        if self.kind != "she" and (not self.t_grid or min(self.t_grid) <= 0):
            raise ConfigError("t_grid must hold positive macroscopic times")
        if list(self.t_grid) != sorted(self.t_grid):
            raise ConfigError("t_grid must be increasing")
        if not isinstance(self.overrides, dict):
            raise ConfigError("overrides must be an object")

    def canonical(self) -> dict:
        return {
            "kind": self.kind,
            "eps": self.eps,
            "rho": self.rho,
            "t_grid": list(self.t_grid),
            "replicas": self.replicas,
            "master_seed": self.master_seed,
            "output_dir": str(self.output_dir),
            "tolerance_k": self.tolerance_k,
            "overrides": self.overrides,
        }

    def config_hash(self) -> str:
        # worker count and output location do not change results, so the
        # hash covers only result-determining fields
        payload = dict(self.canonical())
        payload.pop("output_dir")
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        ).hexdigest()


# ---------------------------------------------------------------------------
# replica pool
# ---------------------------------------------------------------------------


def _chunk_worker(args):
    fn_name, payload, master_seed, stream_base, lo, hi = args
    fn = _REPLICA_FNS[fn_name]
    return [fn(derive_stream(master_seed, stream_base + i), payload, i) for i in range(lo, hi)]


def map_replicas(fn_name, payload, master_seed, stream_base, n, workers, chunk=32):
    """Run a replica function n times; merge results in replica order.

    The task list and per-replica streams depend only on (master_seed,
    stream_base, n), never on the worker count.
    """
    tasks = [
        (fn_name, payload, master_seed, stream_base, lo, min(lo + chunk, n))
        for lo in range(0, n, chunk)
    ]
    if workers <= 1:
        partials = [_chunk_worker(t) for t in tasks]
    else:
        ctx = get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            partials = pool.map(_chunk_worker, tasks, chunksize=1)
    merged = []
    for p in partials:
        merged.extend(p)
    return merged


# ---------------------------------------------------------------------------
# replica functions (module level: picklable, registered by name)
# ---------------------------------------------------------------------------


def _zeta_at(zeta_profile, L, x):
    return int(zeta_profile[x + L])


def _replica_height_sweep(stream, payload, idx):
    params: wasep.WasepParams = payload["params"]
    t_micro_grid = payload["t_micro_grid"]
    cons_bonds = payload["cons_bonds"]
    far_bonds = payload["far_bonds"]
    L = params.half_width
    eng = wasep.Wasep(params, stream, monitored_bonds=set(cons_bonds) | set(far_bonds) | {0})
    zeta0 = wasep.height_profile(eng.state, eng.ledger)
    n0 = np.empty(len(t_micro_grid), dtype=np.int64)
    far = np.zeros(len(far_bonds), dtype=np.int64)
    cons_ok = True
    for j, t in enumerate(t_micro_grid):
        eng.advance(t)
        n0[j] = eng.current(0)
        zeta = wasep.height_profile(eng.state, eng.ledger)
        for x in cons_bonds:
            if _zeta_at(zeta, L, x) - _zeta_at(zeta0, L, x) != -2 * eng.current(x):
                cons_ok = False
        if j == 0:
            far[:] = [eng.current(x) for x in far_bonds]
    return n0, far, cons_ok


def _replica_second_class(stream, payload, idx):
    params: wasep.WasepParams = payload["params"]
    t_micro_grid = payload["t_micro_grid"]
    pair = coupling.init_discrepancy(params, stream)
    pos = np.zeros(len(t_micro_grid), dtype=np.int64)
    valid_through = len(t_micro_grid)
    for j, t in enumerate(t_micro_grid):
        coupling.advance_coupled(pair, params, stream, t)
        pos[j] = pair.second_class_pos
        if pair.invalid:
            valid_through = j
            break
    return pos, valid_through


def _replica_she(stream, payload, idx):
    params: she.SheParams = payload["params"]
    grid = she.brownian_initial(params, stream)
    h0 = -(params.nu / params.lam) * np.log(grid.z)
    she.advance(grid, params, stream, params.t_end)
    if grid.negativity_flag:
        return None
    ht = she.hopf_cole(grid, params).h
    resid = she.conservation_residual(she.HopfColeField(h=h0), she.HopfColeField(h=ht))
    return h0, ht, resid


def _replica_ident_plain(stream, payload, idx):
    params: wasep.WasepParams = payload["params"]
    t_star = payload["t_star_micro"]
    W = payload["profile_window"]
    sym_xs = payload["sym_xs"]
    L = params.half_width
    eng = wasep.Wasep(params, stream, monitored_bonds=(0,))
    zeta0 = wasep.height_profile(eng.state, eng.ledger)
    eng.advance(t_star)
    zeta = wasep.height_profile(eng.state, eng.ledger)
    occ = eng.state.occupation
    block = np.array(
        [int(occ[L - x + 1 : L + x + 1].sum()) for x in sym_xs], dtype=np.int64
    )
    sl = slice(L - W, L + W + 1)
    return zeta0[sl].copy(), zeta[sl].copy(), block


def _replica_ident_coupled(stream, payload, idx):
    params: wasep.WasepParams = payload["params"]
    pair = coupling.init_discrepancy(params, stream)
    coupling.advance_coupled(pair, params, stream, payload["t_star_micro"])
    return pair.second_class_pos, pair.invalid


def _replica_qspeed(stream, payload, idx):
    params: wasep.WasepParams = payload["params"]
    pair = coupling.init_discrepancy(params, stream)
    coupling.advance_coupled(pair, params, stream, payload["t_micro"])
    return pair.second_class_pos, pair.invalid


def _replica_jq_plain(stream, payload, idx):
    params: wasep.WasepParams = payload["params"]
    eng = wasep.Wasep(params, stream, monitored_bonds=(0,))
    eng.advance(payload["t_micro"])
    return eng.current(0)


def _replica_conservation(stream, payload, idx):
    params: wasep.WasepParams = payload["params"]
    bonds = payload["bonds"]
    L = params.half_width
    eng = wasep.Wasep(params, stream, monitored_bonds=set(bonds) | {0})
    zeta0 = wasep.height_profile(eng.state, eng.ledger)
    eng.advance(payload["t_micro"])
    zeta = wasep.height_profile(eng.state, eng.ledger)
    ok = all(
        _zeta_at(zeta, L, x) - _zeta_at(zeta0, L, x) == -2 * eng.current(x) for x in bonds
    )
    return bool(ok)


_REPLICA_FNS = {
    "height_sweep": _replica_height_sweep,
    "second_class": _replica_second_class,
    "she": _replica_she,
    "ident_plain": _replica_ident_plain,
    "ident_coupled": _replica_ident_coupled,
    "qspeed": _replica_qspeed,
    "jq_plain": _replica_jq_plain,
    "conservation": _replica_conservation,
}


# ---------------------------------------------------------------------------
# lattice sizing
# ---------------------------------------------------------------------------


def second_class_window(eps: float, t_micro: float, rho: float = 0.5) -> int:
    """Sites the second-class particle can plausibly reach: drift plus
    4.5 spreads of the eps^{1/3} t^{2/3} displacement scale plus a
    diffusive floor."""
    drift = abs(coupling.characteristic_speed(rho, eps)) * t_micro
    spread = 1.3 * eps ** (1.0 / 3.0) * t_micro ** (2.0 / 3.0)
    return math.ceil(drift + 4.5 * spread + 3.0 * math.sqrt(t_micro)) + 24


def resolve_half_width(cfg: ExperimentConfig, window: int, t_micro: float) -> int:
    mult = float(cfg.overrides.get("buffer_multiplier", 1.0))
    rule = wasep.buffer_half_width(window, t_micro, cfg.eps, multiplier=mult)
    L = int(cfg.overrides.get("half_width", rule))
    if L < rule:
        raise BufferRuleError(
            f"half_width override {L} violates the buffer rule minimum {rule}"
        )
    return L


# ---------------------------------------------------------------------------
# aggregation helpers
# ---------------------------------------------------------------------------


def _var_se(values: np.ndarray, seed: int) -> tuple[float, float]:
    v = float(np.var(values, ddof=1))
    se = stats.bootstrap_stderr(values, lambda a: float(np.var(a, ddof=1)), seed=seed)
    return v, se


def _threshold_record(name: str, value: float, threshold: float) -> stats.CheckRecord:
    """Pass/fail against a hard ceiling (fractions, residuals)."""
    return stats.CheckRecord(
        check_name=name, lhs=float(value), rhs=float(threshold),
        combined_stderr=0.0, z_score=0.0, passed=bool(value < threshold or value == 0.0),
    )


def _scaled_h0(n0: np.ndarray, eps: float, t_macro: float) -> np.ndarray:
    return math.sqrt(eps) * (-2.0 * n0 - wasep.v_eps(eps) * t_macro)


@dataclass
class ExperimentResult:
    sweep_rows: list = field(default_factory=list)  # (eps, rho, t, n, estimator, value, stderr)
    checks: list = field(default_factory=list)  # CheckRecord
    skipped: list = field(default_factory=list)  # {"check_name", "reason"}
    fits: dict = field(default_factory=dict)  # name -> FitResult dict
    histograms: dict = field(default_factory=dict)  # label -> Histogram
    extras: dict = field(default_factory=dict)
    invalid_counts: dict = field(default_factory=dict)

    def merge(self, other: "ExperimentResult") -> "ExperimentResult":
        self.sweep_rows.extend(other.sweep_rows)
        self.checks.extend(other.checks)
        self.skipped.extend(other.skipped)
        self.fits.update(other.fits)
        self.histograms.update(other.histograms)
        self.extras.update(other.extras)
        self.invalid_counts.update(other.invalid_counts)
        return self

    @property
    def all_pass(self) -> bool:
        return all(rec.passed for rec in self.checks)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_height_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    """Plain exclusion through the macroscopic t-grid.

    Produces mean/variance of the rescaled height at the origin per grid
    time, exact conservation checks on every replica, and the
    current-covariance decay profile at the smallest grid time.
    """
    eps = cfg.eps
    t_micro_grid = [wasep.micro_time(eps, t) for t in cfg.t_grid]
    t0 = t_micro_grid[0]
    rate = 1.0 + math.sqrt(eps)
    x_far = math.ceil(4.0 * rate * t0 + 10.0 * math.sqrt(t0))
    far_bonds = [x for x in (0, 16, 64, 256, 1024) if x < x_far] + [x_far]
    cons_bonds = [-1024, -128, -16, -1, 1, 16, 128, 1024]
    window = max(x_far, max(abs(x) for x in cons_bonds))
    L = resolve_half_width(cfg, window, t_micro_grid[-1])
    params = wasep.WasepParams(eps=eps, rho=cfg.rho, half_width=L,
                               micro_horizon=t_micro_grid[-1])
    payload = {
        "params": params,
        "t_micro_grid": t_micro_grid,
        "cons_bonds": cons_bonds,
        "far_bonds": far_bonds,
    }
    rows = map_replicas("height_sweep", payload, cfg.master_seed, PLAIN_SWEEP_BASE,
                        cfg.replicas, cfg.workers)
    n0 = np.stack([r[0] for r in rows])  # (R, nt)
    far = np.stack([r[1] for r in rows])  # (R, nfar)
    violations = sum(1 for r in rows if not r[2])

    res = ExperimentResult()
    res.extras["half_width"] = L
    res.invalid_counts["conservation_violations"] = violations
    res.checks.append(stats.compare("wasep_conservation_exact", float(violations), 0.0, 0.0))

    var_points = []
    for j, t in enumerate(cfg.t_grid):
        h0 = _scaled_h0(n0[:, j], eps, t)
        mean = float(h0.mean())
        se_mean = stats.batch_stderr(h0)
        var, se_var = _var_se(h0, seed=cfg.master_seed + j)
        res.sweep_rows.append((eps, cfg.rho, t, cfg.replicas, "mean_h0", mean, se_mean))
        res.sweep_rows.append((eps, cfg.rho, t, cfg.replicas, "var_h0", var, se_var))
        var_points.append((t, var, se_var))
        if cfg.rho == 0.5:
            res.checks.append(
                stats.compare(f"mean_height[t={t:g}]", mean, t / 24.0, se_mean,
                              k=_MEAN_HEIGHT_TOLERANCE_K)
            )
    if len(var_points) >= 3:
        res.fits["var_h0"] = stats.fit_exponent(var_points).to_dict()

    # covariance decay at the smallest grid time
    base = far[:, 0].astype(float)
    covs = []
    for i, x in enumerate(far_bonds):
        if x == 0:
            continue
        pair = np.stack([base, far[:, i].astype(float)], axis=1)
        c = float(np.cov(pair[:, 0], pair[:, 1], ddof=1)[0, 1])
        se = stats.bootstrap_stderr(
            pair, lambda a: float(np.cov(a[:, 0], a[:, 1], ddof=1)[0, 1]),
            seed=cfg.master_seed + 100 + i,
        )
        covs.append((x, c, se))
        res.sweep_rows.append(
            (eps, cfg.rho, cfg.t_grid[0], cfg.replicas, f"cov_N0_Nx[x={x}]", c, se)
        )
    for (x1, c1, s1), (x2, c2, s2) in zip(covs, covs[1:]):
        rec = stats.compare(
            f"cov_decay[{x1}->{x2}]", abs(c2), abs(c1),
            math.sqrt(s1**2 + s2**2), k=cfg.tolerance_k,
        )
        rec.passed = bool(abs(c2) <= abs(c1) + cfg.tolerance_k * math.sqrt(s1**2 + s2**2))
        res.checks.append(rec)
    x, c, s = covs[-1]
    res.checks.append(stats.compare(f"cov_zero_far[x={x}]", c, 0.0, s, k=cfg.tolerance_k))
    return res


def run_second_class_sweep(cfg: ExperimentConfig) -> ExperimentResult:
    """Coupled pair through the t-grid: moments, histograms, symmetry and
    second-moment monotonicity of the displacement law."""
    eps = cfg.eps
    t_micro_grid = [wasep.micro_time(eps, t) for t in cfg.t_grid]
    window = second_class_window(eps, t_micro_grid[-1], cfg.rho)
    L = resolve_half_width(cfg, window, t_micro_grid[-1])
    params = wasep.WasepParams(eps=eps, rho=cfg.rho, half_width=L,
                               micro_horizon=t_micro_grid[-1])
    payload = {"params": params, "t_micro_grid": t_micro_grid}
    rows = map_replicas("second_class", payload, cfg.master_seed, COUPLED_SWEEP_BASE,
                        cfg.replicas, cfg.workers)
    pos = np.stack([r[0] for r in rows])  # (R, nt)
    valid_through = np.array([r[1] for r in rows])
    n_invalid = int((valid_through < len(cfg.t_grid)).sum())

    res = ExperimentResult()
    res.extras["half_width"] = L
    res.invalid_counts["boundary_hits"] = n_invalid
    res.checks.append(
        _threshold_record("second_class_invalid_fraction", n_invalid / cfg.replicas, 0.01)
    )

    v = coupling.characteristic_speed(cfg.rho, eps)
    d_points = []
    m2_series = []
    for j, t in enumerate(cfg.t_grid):
        ok = valid_through > j
        p = pos[ok, j]
        n_valid = int(ok.sum())
        t_mic = t_micro_grid[j]
        samples = [
            coupling.DisplacementSample(t_micro=t_mic, position=int(k), centered=float(k - v * t_mic))
            for k in p
        ]
        mean_x = float(p.mean())
        se_mean = stats.batch_stderr(p.astype(float))
        res.sweep_rows.append((eps, cfg.rho, t, n_valid, "mean_x", mean_x, se_mean))
        res.checks.append(
            stats.compare(f"second_class_speed[t={t:g}]", mean_x, v * t_mic, se_mean,
                          k=_QSPEED_TOLERANCE_K)
        )
        for m in (1.0, 2.0):
            est, se = coupling.displacement_moment(samples, m)
            res.sweep_rows.append(
                (eps, cfg.rho, t, n_valid, f"m{m:g}_centered", est, se)
            )
        if cfg.rho == 0.5:
            hist = coupling.estimate_S(samples, eps, t)
            res.histograms[f"t{t:g}"] = hist
            mass_total = float(hist.counts.sum()) / hist.total
            res.checks.append(stats.compare(f"s_integral[t={t:g}]", mass_total, 1.0, 0.0))
            sym = stats.tv_symmetry_check(p, eps, seed=cfg.master_seed + 300 + j)
            res.sweep_rows.append(
                (eps, cfg.rho, t, n_valid, "tv_symmetry", sym["tv"], sym["null_sd"])
            )
            rec = stats.CheckRecord(
                check_name=f"s_symmetry_tv[t={t:g}]", lhs=sym["tv"], rhs=sym["null_mean"],
                combined_stderr=sym["null_sd"],
                z_score=(sym["tv"] - sym["null_mean"]) / sym["null_sd"] if sym["null_sd"] else 0.0,
                passed=sym["pass"],
            )
            res.checks.append(rec)
            m2 = stats.moment_of_histogram(hist, 2.0)
            se_m2 = stats.bootstrap_stderr(
                (eps * p.astype(float)) ** 2, lambda a: float(a.mean()),
                seed=cfg.master_seed + 400 + j,
            )
            res.sweep_rows.append((eps, cfg.rho, t, n_valid, "s_second_moment", m2, se_m2))
            d = stats.diffusivity(t, hist)
            res.sweep_rows.append((eps, cfg.rho, t, n_valid, "diffusivity", d, se_m2 / t))
            d_points.append((t, d, se_m2 / t))
            m2_series.append((t, j))
    if cfg.rho == 0.5:
        if len(d_points) >= 3:
            res.fits["diffusivity"] = stats.fit_exponent(d_points).to_dict()
            m2_pts = [(t, d * t, se * t) for (t, d, se) in d_points]
            res.fits["s_second_moment"] = stats.fit_exponent(m2_pts).to_dict()
        # paired monotonicity of the macroscopic second moment across the grid
        for (t1, j1), (t2, j2) in zip(m2_series, m2_series[1:]):
            ok = valid_through > j2
            d2 = (eps * pos[ok, j2].astype(float)) ** 2 - (eps * pos[ok, j1].astype(float)) ** 2
            mean_d = float(d2.mean())
            se_d = stats.batch_stderr(d2)
            rec = stats.compare(
                f"s_m2_monotone[{t1:g}->{t2:g}]", mean_d, 0.0, se_d, k=cfg.tolerance_k
            )
            rec.passed = bool(mean_d >= -cfg.tolerance_k * se_d)
            res.checks.append(rec)
    return res


def she_params_from(cfg: ExperimentConfig) -> she.SheParams:
    o = cfg.overrides
    nu = float(o.get("nu", 0.5))
    t_end = float(o.get("she_t_end", 4.0))
    x_window = float(o.get("she_window", 20.0))
    rule = x_window + 8.0 * math.sqrt(max(nu * t_end, 0.0)) + 10.0
    half_width = float(o.get("she_half_width", math.ceil(rule)))
    if half_width < rule:
        raise BufferRuleError(
            f"she_half_width override {half_width} violates the buffer rule minimum {rule:.1f}"
        )
    return she.SheParams(
        nu=nu,
        lam=float(o.get("lam", 0.5)),
        sigma=float(o.get("sigma", 1.0)),
        dx=float(o.get("dx", 0.1)),
        dt=float(o.get("dt", 0.0025)),
        half_width=half_width,
        t_end=t_end,
    )


def run_she_ensemble(cfg: ExperimentConfig) -> ExperimentResult:
    """SHE identity suite: conservation, covariance identity and decay,
    increment stationarity, heat-kernel refinement, negativity accounting."""
    params = she_params_from(cfg)
    x_window = float(cfg.overrides.get("she_window", 20.0))
    rows = map_replicas("she", {"params": params}, cfg.master_seed, SHE_BASE,
                        cfg.replicas, cfg.workers)
    kept = [r for r in rows if r is not None]
    n_neg = cfg.replicas - len(kept)
    h0_rows = np.stack([r[0] for r in kept])
    ht_rows = np.stack([r[1] for r in kept])
    max_resid = max(r[2] for r in kept)

    res = ExperimentResult()
    res.invalid_counts["negativity"] = n_neg
    res.checks.append(_threshold_record("she_negativity_fraction", n_neg / cfg.replicas, 0.01))
    res.checks.append(_threshold_record("she_conservation_residual", max_resid, 1e-9))

    xs = [0.0]
    for x in (2.0, 4.0, 8.0, 12.0, 16.0, 20.0):
        if x <= x_window:
            xs.extend((x, -x))
    suite = she.cov_suite(h0_rows, ht_rows, params, xs, k_tol=cfg.tolerance_k,
                          seed=cfg.master_seed)
    res.checks.extend(suite["records"])
    res.extras["cov_profile"] = suite["profile"]
    # nonnegativity of Var(h) - |x| along the profile (one-sided, with the
    # excess estimator's own error bar)
    for x, excess, cov, se_diff, se_excess in suite["profile"]:
        if x == 0.0:
            continue
        rec = stats.compare(f"var_minus_x_nonneg[x={x:g}]", excess, 0.0, se_excess,
                            k=cfg.tolerance_k)
        rec.passed = bool(excess >= -cfg.tolerance_k * se_excess)
        res.checks.append(rec)
    if abs(params.slope_variance_rate - 1.0) < 1e-12:
        for delta in (0.5, 1.0, 2.0):
            outs = {}
            for label, rows_ in (("t0", h0_rows), ("t", ht_rows)):
                out = she.increment_check(rows_, params, delta, k_tol=cfg.tolerance_k)
                outs[label] = out
                rec = stats.compare(
                    f"increment_var[{label},delta={delta:g}]", out["variance"], delta,
                    out["variance_stderr"], k=cfg.tolerance_k,
                )
                rec.passed = bool(out["variance_pass"])
                res.checks.append(rec)
                rec2 = stats.compare(
                    f"increment_whiteness[{label},delta={delta:g}]", out["disjoint_corr"],
                    0.0, 1.0 / math.sqrt(rows_.shape[0]), k=cfg.tolerance_k,
                )
                rec2.passed = bool(out["disjoint_corr_pass"])
                res.checks.append(rec2)
            se_pair = math.sqrt(outs["t"]["variance_stderr"] ** 2
                                + outs["t0"]["variance_stderr"] ** 2)
            res.checks.append(stats.compare(
                f"increment_stationarity[delta={delta:g}]",
                outs["t"]["variance"], outs["t0"]["variance"],
                0.05 * delta / cfg.tolerance_k + se_pair, k=cfg.tolerance_k,
            ))
    # deterministic heat-kernel refinement (sigma = 0)
    e_coarse = _heat_oracle_error(params, scale=2.0)
    e_fine = _heat_oracle_error(params, scale=1.0)
    ratio = e_coarse / e_fine if e_fine > 0 else math.inf
    rec = stats.compare("heat_refinement_ratio", ratio, 4.0, 0.0)
    rec.passed = bool(ratio >= 3.0)
    res.checks.append(rec)
    res.extras["heat_oracle_errors"] = {"coarse": e_coarse, "fine": e_fine}
    res.extras["she_params"] = {
        "nu": params.nu, "lambda": params.lam, "sigma": params.sigma,
        "dx": params.dx, "dt": params.dt, "half_width": params.half_width,
        "t_end": params.t_end,
    }
    res.extras["fields_snapshot"] = _fields_snapshot(params, cfg.master_seed)
    return res


def _heat_oracle_error(params: she.SheParams, scale: float) -> float:
    width0 = 1.5
    t_end = min(params.t_end, 0.5)
    p = she.SheParams(
        nu=params.nu, lam=params.lam, sigma=0.0,
        dx=params.dx * scale, dt=params.dt * scale * scale,
        half_width=params.half_width, t_end=t_end,
    )
    xs = p.xs
    grid = she.SheGrid(z=np.exp(-(xs**2) / (2 * width0**2)), time=0.0)
    she.advance(grid, p, derive_stream(0, 0), t_end)
    exact = she.heat_kernel_gaussian(xs, t_end, p.nu, width0)
    window = np.abs(xs) <= p.half_width / 2
    return float(np.max(np.abs(grid.z[window] - exact[window])))


def _fields_snapshot(params: she.SheParams, master_seed: int):
    stream = derive_stream(master_seed, SHE_BASE)
    grid = she.brownian_initial(params, stream)
    she.advance(grid, params, stream, params.t_end)
    if grid.negativity_flag:
        return None
    h = she.hopf_cole(grid, params).h
    return [(float(x), float(z), float(hh)) for x, z, hh in zip(params.xs, grid.z, h)]


def run_qspeed(cfg: ExperimentConfig) -> ExperimentResult:
    """Second-class mean-speed identity at several densities."""
    o = cfg.overrides
    eps = float(o.get("qspeed_eps", 0.04))
    t_micro = float(o.get("qspeed_t_micro", 500.0))
    n = int(o.get("qspeed_replicas", 10_000))
    rhos = tuple(o.get("qspeed_rhos", (0.3, 0.5, 0.7)))
    res = ExperimentResult()
    if n < 2000:
        res.skipped.append({"check_name": "second_class_speed", "reason": "insufficient power"})
        return res
    for i, rho in enumerate(rhos):
        window = second_class_window(eps, t_micro, rho)
        rule = wasep.buffer_half_width(window, t_micro, eps)
        params = wasep.WasepParams(eps=eps, rho=rho, half_width=rule, micro_horizon=t_micro)
        rows = map_replicas("qspeed", {"params": params, "t_micro": t_micro},
                            cfg.master_seed, QSPEED_BASE + (i << 28), n, cfg.workers)
        pos = np.array([r[0] for r in rows if not r[1]], dtype=float)
        n_invalid = n - pos.size
        res.invalid_counts[f"qspeed_boundary_hits[rho={rho:g}]"] = n_invalid
        v = coupling.characteristic_speed(rho, eps)
        se = stats.batch_stderr(pos)
        res.checks.append(
            stats.compare(f"qspeed[rho={rho:g}]", float(pos.mean()), v * t_micro, se,
                          k=_QSPEED_TOLERANCE_K)
        )
    return res


def run_jq(cfg: ExperimentConfig) -> ExperimentResult:
    """Current-variance vs second-class identity from two independent runs:
    Var[J_0(T)] = rho (1-rho) E|x(T)|."""
    o = cfg.overrides
    eps = float(o.get("jq_eps", 0.04))
    t_micro = float(o.get("jq_t_micro", 200.0))
    n = int(o.get("jq_replicas", 50_000))
    rho = float(o.get("jq_rho", 0.3))
    res = ExperimentResult()
    if n < 5000:
        res.skipped.append({"check_name": "current_variance_identity", "reason": "insufficient power"})
        return res
    L_plain = wasep.buffer_half_width(1, t_micro, eps)
    params_plain = wasep.WasepParams(eps=eps, rho=rho, half_width=L_plain, micro_horizon=t_micro)
    rows = map_replicas("jq_plain", {"params": params_plain, "t_micro": t_micro},
                        cfg.master_seed, JQ_PLAIN_BASE, n, cfg.workers)
    currents = np.array(rows, dtype=float)
    var_j, se_var = _var_se(currents, seed=cfg.master_seed + 17)

    window = second_class_window(eps, t_micro, rho)
    L_coup = wasep.buffer_half_width(window, t_micro, eps)
    params_coup = wasep.WasepParams(eps=eps, rho=rho, half_width=L_coup, micro_horizon=t_micro)
    rows = map_replicas("qspeed", {"params": params_coup, "t_micro": t_micro},
                        cfg.master_seed, JQ_COUPLED_BASE, n, cfg.workers)
    pos = np.array([r[0] for r in rows if not r[1]], dtype=float)
    res.invalid_counts["jq_boundary_hits"] = n - pos.size
    mean_abs = float(np.abs(pos).mean())
    se_abs = stats.batch_stderr(np.abs(pos))

    lhs = var_j
    if cfg.overrides.get("fault_injection") == "jq":
        lhs *= 1.2  # test hook: deliberately corrupted estimator
    rhs = rho * (1.0 - rho) * mean_abs
    se = math.sqrt(se_var**2 + (rho * (1.0 - rho) * se_abs) ** 2)
    res.checks.append(stats.compare("current_variance_identity", lhs, rhs, se, k=cfg.tolerance_k))
    res.extras["jq"] = {"var_J0": var_j, "mean_abs_x": mean_abs}
    return res


def run_identity_ensembles(cfg: ExperimentConfig) -> ExperimentResult:
    """Variance-profile identities at one grid time from two independent
    ensembles (plain for Var(h), coupled for the correlation histogram)."""
    o = cfg.overrides
    eps = cfg.eps
    t_star = float(o.get("ident_t_macro", 16.0))
    n_plain = int(o.get("ident_plain_replicas", cfg.replicas))
    n_coup = int(o.get("ident_coupled_replicas", 2 * cfg.replicas))
    k_tol = cfg.tolerance_k
    res = ExperimentResult()
    if n_plain < 500 or n_coup < 1000:
        res.skipped.append({"check_name": "variance_profile_identities",
                            "reason": "insufficient power"})
        return res
    t_micro = wasep.micro_time(eps, t_star)
    W = second_class_window(eps, t_micro, 0.5)
    sym_xs = (4, 8, 16, 32, 64)
    L = resolve_half_width(cfg, W, t_micro)
    params = wasep.WasepParams(eps=eps, rho=0.5, half_width=L, micro_horizon=t_micro)
    payload = {"params": params, "t_star_micro": t_micro, "profile_window": W,
               "sym_xs": sym_xs}
    plain = map_replicas("ident_plain", payload, cfg.master_seed, IDENT_PLAIN_BASE,
                         n_plain, cfg.workers)
    zeta_rows = np.stack([r[1] for r in plain]).astype(float)  # (R, 2W+1)
    block_rows = np.stack([r[2] for r in plain]).astype(float)
    coup = map_replicas("ident_coupled", payload, cfg.master_seed, IDENT_COUPLED_BASE,
                        n_coup, cfg.workers)
    pos = np.array([r[0] for r in coup if not r[1]], dtype=np.int64)
    res.invalid_counts["ident_boundary_hits"] = n_coup - pos.size

    sites = np.arange(-W, W + 1)
    var_prof = np.var(zeta_rows, axis=0, ddof=1)  # Var(zeta(t, k))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((cfg.master_seed, 0xB007, 1))))
    nboot = 200
    boot_prof = np.empty((nboot, sites.size))
    n0_col = -0.5 * zeta_rows[:, W]  # N(t, 0) = -zeta(t,0)/2
    for b in range(nboot):
        idx = rng.integers(0, zeta_rows.shape[0], zeta_rows.shape[0])
        boot_prof[b] = np.var(zeta_rows[idx], axis=0, ddof=1)
    hist = stats.Histogram.from_sites(pos, eps)
    res.histograms[f"ident_t{t_star:g}"] = hist
    res.checks.append(
        stats.compare("ident_s_integral", float(hist.counts.sum()) / hist.total, 1.0, 0.0)
    )
    sym = stats.tv_symmetry_check(pos, eps, seed=cfg.master_seed + 71)
    rec = stats.CheckRecord(
        check_name="ident_s_symmetry_tv", lhs=sym["tv"], rhs=sym["null_mean"],
        combined_stderr=sym["null_sd"],
        z_score=(sym["tv"] - sym["null_mean"]) / sym["null_sd"] if sym["null_sd"] else 0.0,
        passed=sym["pass"],
    )
    res.checks.append(rec)

    # (sym): Cov(N(t,0), sum_{-x<y<=x} eta(t,y)) = 0
    for i, x in enumerate(sym_xs):
        pair = np.stack([n0_col, block_rows[:, i]], axis=1)
        c = float(np.cov(pair[:, 0], pair[:, 1], ddof=1)[0, 1])
        se = stats.bootstrap_stderr(
            pair, lambda a: float(np.cov(a[:, 0], a[:, 1], ddof=1)[0, 1]),
            seed=cfg.master_seed + 500 + i,
        )
        res.checks.append(stats.compare(f"current_block_sym[x={x}]", c, 0.0, se, k=k_tol))

    # (varminusx): Var(zeta(t,x)) - |x| = 4 Cov(N(t,0), N(t,x)), same ensemble,
    # bootstrap of the difference
    zeta0_rows = np.stack([r[0] for r in plain]).astype(float)
    vx_grid = [x for x in (-64, -48, -32, -24, -16, -8, -4, 0, 4, 8, 16, 24, 32, 48, 64)
               if abs(x) <= W]
    for x in vx_grid:
        col = zeta_rows[:, W + x]
        n_col = 0.5 * (zeta0_rows[:, W + x] - col)  # N(t,x) by exact conservation
        lhs = float(np.var(col, ddof=1)) - abs(x)
        cov = float(np.cov(n0_col, n_col, ddof=1)[0, 1])
        stackx = np.stack([col, n0_col, n_col], axis=1)

        def diff_stat(a, _x=x):
            return float(
                np.var(a[:, 0], ddof=1) - abs(_x)
                - 4.0 * np.cov(a[:, 1], a[:, 2], ddof=1)[0, 1]
            )

        se = stats.bootstrap_stderr(stackx, diff_stat, seed=cfg.master_seed + 600 + x)
        res.checks.append(
            stats.compare(f"var_minus_x_cov[x={x}]", lhs, 4.0 * cov, se, k=k_tol)
        )

    # nonnegativity and monotone decay of the excess profile
    g = var_prof - np.abs(sites)
    g_boot = boot_prof - np.abs(sites)
    pos_grid = [x for x in (0, 4, 8, 16, 24, 32, 48, 64) if x <= W]
    for side in (1, -1):
        prev = None
        for x in pos_grid:
            i = W + side * x
            se = float(g_boot[:, i].std(ddof=1))
            rec = stats.compare(f"var_excess_nonneg[x={side * x}]", float(g[i]), 0.0, se, k=k_tol)
            rec.passed = bool(g[i] >= -k_tol * se)
            res.checks.append(rec)
            if prev is not None:
                dvals = g_boot[:, i] - g_boot[:, prev]
                se_d = float(dvals.std(ddof=1))
                rec = stats.compare(
                    f"var_excess_monotone[{side * x}]", float(g[i] - g[prev]), 0.0, se_d, k=k_tol
                )
                rec.passed = bool(g[i] - g[prev] <= k_tol * se_d)
                res.checks.append(rec)
            prev = i
        if side == 1 and 0 in pos_grid:
            pos_grid = pos_grid[1:]  # do not duplicate x = 0 on the negative side

    # Laplacian identity: S density vs Delta_eps Var(h_eps) from independent sets
    lap_ks = [k for k in range(-60, 61, 6) if abs(k) + 1 <= W]
    res.checks.extend(
        stats.identity_laplacian(sites, eps * var_prof, eps * boot_prof, hist, eps,
                                 lap_ks, k_tol=k_tol)
    )

    # (hS) reconstruction: Var(h_eps(t,x)) vs |x| + 2 tail integral of S
    pos_f = pos.astype(float)
    for k in (0, 8, 16, 32, 48, 64):
        if k > W:
            continue
        i = W + k
        lhs = eps * float(var_prof[i])
        se_lhs = eps * float(boot_prof[:, i].std(ddof=1))
        rhs = stats.reconstruct_var_from_S(eps * k, hist)

        def recon_stat(sample_pos, _k=k):
            hb = stats.Histogram.from_sites(sample_pos.astype(np.int64), eps)
            return stats.reconstruct_var_from_S(eps * _k, hb)

        se_rhs = stats.bootstrap_stderr(pos_f, recon_stat, nboot=100,
                                        seed=cfg.master_seed + 700 + k)
        res.checks.append(
            stats.compare(f"reconstruction_hS[x={eps * k:g}]", lhs, rhs,
                          math.sqrt(se_lhs**2 + se_rhs**2), k=k_tol)
        )

    # (v-|x|) weighted integrals against histogram moments, m in (1, 3)
    var_h = eps * var_prof
    edge_se = float((eps * boot_prof[:, -5:].mean(axis=1)).std(ddof=1))
    for m in (1.0, 1.5, 2.0, 2.5):
        lhs = stats.moment_of_histogram(hist, m)

        def mom_stat(sample_pos, _m=m):
            return float(np.mean(np.abs(eps * sample_pos) ** _m))

        se_lhs = stats.bootstrap_stderr(pos_f, mom_stat, nboot=100,
                                        seed=cfg.master_seed + 800 + int(m * 10))
        rhs = stats.weighted_var_integral(sites, var_h, m, eps, noise_floor=3 * edge_se)
        rhs_boot = np.array([
            stats.weighted_var_integral(sites, eps * boot_prof[b], m, eps,
                                        noise_floor=math.inf)
            for b in range(nboot)
        ])
        se_rhs = float(rhs_boot.std(ddof=1))
        name = "v0_identity" if m == 1.0 else f"weighted_integral[m={m:g}]"
        res.checks.append(
            stats.compare(name, lhs, rhs, math.sqrt(se_lhs**2 + se_rhs**2), k=k_tol)
        )
    res.extras["ident"] = {"t_star": t_star, "profile_window": W,
                           "n_plain": n_plain, "n_coupled": n_coup}
    return res


def run_conservation_small(cfg: ExperimentConfig) -> ExperimentResult:
    """Exact height/current bookkeeping identity on a quick ensemble."""
    eps = cfg.eps
    t_micro = wasep.micro_time(eps, min(cfg.t_grid))
    bonds = (-16, -1, 1, 16)
    L = wasep.buffer_half_width(16, t_micro, eps)
    params = wasep.WasepParams(eps=eps, rho=cfg.rho, half_width=L, micro_horizon=t_micro)
    n = min(cfg.replicas, 100)
    rows = map_replicas("conservation", {"params": params, "t_micro": t_micro, "bonds": bonds},
                        cfg.master_seed, CONS_BASE, n, cfg.workers)
    violations = sum(1 for ok in rows if not ok)
    res = ExperimentResult()
    res.invalid_counts["conservation_violations"] = violations
    res.checks.append(stats.compare("wasep_conservation_exact", float(violations), 0.0, 0.0))
    return res


def run_identity_suite(cfg: ExperimentConfig) -> ExperimentResult:
    res = run_conservation_small(cfg)
    res.merge(run_identity_ensembles(cfg))
    res.merge(run_qspeed(cfg))
    res.merge(run_jq(cfg))
    return res


def run_buffer_diagnostic(cfg: ExperimentConfig) -> ExperimentResult:
    """Doubled-buffer stability check: the origin-height variance at the
    largest grid time must agree within one combined standard error."""
    res = ExperimentResult()
    t_max = cfg.t_grid[-1]
    vals = []
    for mult, base in ((1.0, DIAG_BASE), (2.0, DIAG_BASE + (1 << 28))):
        t_micro = wasep.micro_time(cfg.eps, t_max)
        L = wasep.buffer_half_width(8, t_micro, cfg.eps, multiplier=mult)
        params = wasep.WasepParams(eps=cfg.eps, rho=cfg.rho, half_width=L,
                                   micro_horizon=t_micro)
        payload = {"params": params, "t_micro_grid": [t_micro], "cons_bonds": [1],
                   "far_bonds": [0]}
        rows = map_replicas("height_sweep", payload, cfg.master_seed, base,
                            cfg.replicas, cfg.workers)
        h0 = _scaled_h0(np.stack([r[0] for r in rows])[:, 0], cfg.eps, t_max)
        vals.append(_var_se(h0, seed=cfg.master_seed + int(mult)))
    (v1, s1), (v2, s2) = vals
    res.checks.append(
        stats.compare("buffer_doubling_stability", v1, v2, math.sqrt(s1**2 + s2**2), k=1.0)
    )
    return res


RUNNERS = {
    "wasep-height": lambda cfg: run_height_sweep(cfg),
    "second-class": lambda cfg: run_second_class_sweep(cfg),
    "she": lambda cfg: run_she_ensemble(cfg),
    "identity-suite": lambda cfg: run_identity_suite(cfg),
    "exponent-sweep": lambda cfg: run_height_sweep(cfg).merge(run_second_class_sweep(cfg)),
}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    res = RUNNERS[cfg.kind](cfg)
    if cfg.overrides.get("buffer_diagnostic") and cfg.kind in ("wasep-height", "exponent-sweep"):
        res.merge(run_buffer_diagnostic(cfg))
    return res


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_outputs(cfg: ExperimentConfig, res: ExperimentResult, wall_time: float) -> dict:
    """Write sweep CSV, histogram CSVs, report JSON and the run manifest.

    Returns the manifest dictionary.
    """
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create output directory {out}: {exc}") from exc
    files = []

    if res.sweep_rows:
        path = out / "sweep.csv"
        lines = ["eps,rho,t_macro,n_replicas,estimator,value,stderr"]
        for row in res.sweep_rows:
            lines.append(",".join(_fmt(v) for v in row))
        for name, fit in sorted(res.fits.items()):
            lines.append(
                ",".join([
                    _fmt(cfg.eps), _fmt(cfg.rho), "", _fmt(cfg.replicas),
                    f"fit_slope:{name}", _fmt(fit["slope"]), _fmt(fit["slope_stderr"]),
                ])
            )
        path.write_text("\n".join(lines) + "\n")
        files.append(path)

    for label, hist in sorted(res.histograms.items()):
        path = out / f"histogram_{label}.csv"
        lines = ["bin_center_macro,density,count"]
        for k, c in zip(hist.ks, hist.counts):
            lines.append(f"{_fmt(float(hist.eps * k))},{_fmt(float(c / hist.total / hist.eps))},{c}")
        path.write_text("\n".join(lines) + "\n")
        files.append(path)

    if res.extras.get("fields_snapshot"):
        path = out / "fields.csv"
        lines = ["x,Z,h"]
        for x, z, h in res.extras["fields_snapshot"]:
            lines.append(f"{_fmt(x)},{_fmt(z)},{_fmt(h)}")
        path.write_text("\n".join(lines) + "\n")
        files.append(path)

    report = {
        "kind": cfg.kind,
        "config_hash": cfg.config_hash(),
        "tolerance_k": cfg.tolerance_k,
        "checks": [rec.to_dict() for rec in res.checks],
        "skipped": res.skipped,
        "fits": res.fits,
        "invalid_counts": res.invalid_counts,
        "extras": {k: v for k, v in res.extras.items() if k != "fields_snapshot"},
        "pass": res.all_pass,
    }
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    files.append(path)

    manifest = {
        "tool_version": TOOL_VERSION,
        "config": cfg.canonical(),
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.master_seed,
        "stream_bases": {
            "plain_sweep": PLAIN_SWEEP_BASE, "coupled_sweep": COUPLED_SWEEP_BASE,
            "ident_plain": IDENT_PLAIN_BASE, "ident_coupled": IDENT_COUPLED_BASE,
            "qspeed": QSPEED_BASE, "jq_plain": JQ_PLAIN_BASE,
            "jq_coupled": JQ_COUPLED_BASE, "she": SHE_BASE,
        },
        "wall_time_seconds": wall_time,
        "invalid_replica_counts": res.invalid_counts,
        "outputs": [
            {"file": f.name, "sha256": hashlib.sha256(f.read_bytes()).hexdigest()}
            for f in files if f.name != "manifest.json"
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_and_persist(cfg: ExperimentConfig) -> tuple[ExperimentResult, dict]:
    start = time.perf_counter()
    res = run_experiment(cfg)
    manifest = write_outputs(cfg, res, wall_time=time.perf_counter() - start)
    return res, manifest
