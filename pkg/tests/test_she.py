import math

import numpy as np
import pytest

from kpzlab.rng import derive_stream
from kpzlab.she import (
    HopfColeField,
    SheGrid,
    SheParams,
    advance,
    brownian_initial,
    conservation_residual,
    cov_suite,
    current_mass,
    heat_kernel_gaussian,
    hopf_cole,
    increment_check,
    rescale_params,
    step,
)


def small_params(**kw):
    base = dict(nu=0.5, lam=0.5, sigma=1.0, dx=0.1, dt=0.0025, half_width=12.0, t_end=1.0)
    base.update(kw)
    return SheParams(**base)


# ---------------------------------------------------------------------------
# parameters / initial data
# ---------------------------------------------------------------------------


def test_stability_validation():
    with pytest.raises(ValueError, match="stability"):
        SheParams(nu=0.5, dx=0.05, dt=0.0025)  # nu dt / dx^2 = 0.5
    with pytest.raises(ValueError):
        SheParams(nu=-1.0)


def test_brownian_initial_origin_is_one():
    grid = brownian_initial(small_params(), derive_stream(20, 0))
    assert grid.z[small_params().origin_index()] == 1.0


def test_brownian_initial_variance_rate():
    # ensemble variance of B(x) grows like the stationary slope rate (= 1
    # at the matched normalization) times |x|
    params = small_params()
    nrep = 3000
    xs = (2.0, -5.0, 9.0)
    cols = {x: np.empty(nrep) for x in xs}
    for r in range(nrep):
        grid = brownian_initial(params, derive_stream(21, r))
        b = np.log(grid.z)
        for x in xs:
            cols[x][r] = b[params.index_of(x)]
    for x in xs:
        var = cols[x].var(ddof=1)
        want = params.b_variance_rate * abs(x)
        se = want * math.sqrt(2.0 / nrep)
        assert abs(var - want) < 5 * se, f"x={x}: {var} vs {want}"
    assert params.b_variance_rate == pytest.approx(1.0)


def test_brownian_increments_independent():
    params = small_params()
    nrep = 4000
    a = np.empty(nrep)
    b = np.empty(nrep)
    for r in range(nrep):
        grid = brownian_initial(params, derive_stream(22, r))
        lb = np.log(grid.z)
        a[r] = lb[params.index_of(4.0)]  # B(4) - B(0)
        b[r] = lb[params.index_of(8.0)] - lb[params.index_of(4.0)]
    corr = np.corrcoef(a, b)[0, 1]
    assert abs(corr) < 4.0 / math.sqrt(nrep)


# ---------------------------------------------------------------------------
# deterministic (sigma = 0) dynamics
# ---------------------------------------------------------------------------


def test_constant_one_is_fixed_point():
    params = small_params(sigma=0.0)
    grid = SheGrid(z=np.ones(params.ncells), time=0.0)
    advance(grid, params, derive_stream(23, 0), 1.0)
    np.testing.assert_array_equal(grid.z, np.ones(params.ncells))


def gaussian_bump_error(dx, dt, t_end=0.5, width0=1.5):
    params = SheParams(nu=0.5, lam=0.5, sigma=0.0, dx=dx, dt=dt, half_width=12.0, t_end=t_end)
    xs = params.xs
    grid = SheGrid(z=np.exp(-(xs**2) / (2 * width0**2)), time=0.0)
    advance(grid, params, derive_stream(23, 1), t_end)
    exact = heat_kernel_gaussian(xs, t_end, params.nu, width0)
    window = np.abs(xs) <= 6.0  # stay clear of the reflecting boundary
    return float(np.max(np.abs(grid.z[window] - exact[window])))


def test_heat_kernel_oracle_and_refinement():
    e_coarse = gaussian_bump_error(dx=0.2, dt=0.01)
    e_fine = gaussian_bump_error(dx=0.1, dt=0.0025)
    assert e_coarse < 1e-3  # O(dt + dx^2) at this resolution
    assert e_coarse / e_fine >= 3.0


def test_step_advances_one_dt():
    params = small_params(sigma=0.0)
    grid = SheGrid(z=np.ones(params.ncells), time=0.0)
    step(grid, params, derive_stream(23, 2))
    assert grid.time == pytest.approx(params.dt)


def test_mean_field_solves_discrete_heat_equation():
    # noise has zero conditional mean, so E Z follows the noiseless scheme;
    # oracle = sigma=0 evolution of each replica's own initial data
    params = small_params(half_width=10.0, t_end=0.5)
    nrep = 1500
    noisy = np.empty(nrep)
    oracle = np.empty(nrep)
    i0 = params.origin_index()
    p0 = SheParams(nu=0.5, lam=0.5, sigma=0.0, dx=params.dx, dt=params.dt,
                   half_width=10.0, t_end=0.5)
    for r in range(nrep):
        stream = derive_stream(24, r)
        grid = brownian_initial(params, stream)
        det = SheGrid(z=grid.z.copy(), time=0.0)
        advance(grid, params, stream, 0.5)
        if grid.negativity_flag:
            continue
        advance(det, p0, stream, 0.5)
        noisy[r] = grid.z[i0]
        oracle[r] = det.z[i0]
    diff = noisy - oracle  # paired comparison kills the initial-data spread
    se = diff.std(ddof=1) / math.sqrt(nrep)
    assert abs(diff.mean()) < 4 * se


# ---------------------------------------------------------------------------
# log transform and conservation
# ---------------------------------------------------------------------------


def test_hopf_cole_trivial_values():
    params = small_params()
    n = params.ncells
    assert np.all(hopf_cole(SheGrid(z=np.ones(n), time=0.0), params).h == 0.0)
    h = hopf_cole(SheGrid(z=np.full(n, math.exp(-2.0)), time=0.0), params).h
    np.testing.assert_allclose(h, 2.0)
    grid = brownian_initial(params, derive_stream(25, 0))
    h0 = hopf_cole(grid, params).h
    np.testing.assert_allclose(h0, -np.log(grid.z), atol=1e-12)


def test_hopf_cole_rejects_nonpositive():
    params = small_params()
    z = np.ones(params.ncells)
    z[3] = 0.0
    with pytest.raises(ValueError):
        hopf_cole(SheGrid(z=z, time=0.0), params)


def test_current_mass_and_conservation():
    params = small_params(half_width=8.0)
    stream = derive_stream(26, 3)
    grid = brownian_initial(params, stream)
    h0 = hopf_cole(grid, params)
    n, m_t, m_0 = current_mass(h0, h0)
    assert np.all(n == 0.0)
    advance(grid, params, stream, 0.25)
    ht = hopf_cole(grid, params)
    n, m_t, m_0 = current_mass(h0, ht)
    origin = params.origin_index()
    assert m_t[origin] == 0.0 and m_0[origin] == 0.0
    assert conservation_residual(h0, ht) <= 1e-9
    with pytest.raises(ValueError):
        current_mass(HopfColeField(h=np.zeros(3)), HopfColeField(h=np.zeros(5)))


def test_negativity_flag_and_exclusion():
    params = small_params(sigma=40.0, half_width=4.0)  # violent noise goes negative fast
    stream = derive_stream(27, 0)
    grid = brownian_initial(params, stream)
    advance(grid, params, stream, 1.0)
    assert grid.negativity_flag
    with pytest.raises(RuntimeError):
        advance(grid, params, stream, 2.0)
    with pytest.raises(ValueError):
        hopf_cole(grid, params)


def test_sign_flip_invariance_of_log_variance():
    # the noise coefficient enters as written in the equation; its sign is
    # distributionally irrelevant for Var(log Z)
    nrep = 800
    out = {}
    for sig in (1.0, -1.0):
        params = small_params(sigma=sig, half_width=8.0)
        vals = []
        for r in range(nrep):
            stream = derive_stream(28, r)
            grid = brownian_initial(params, stream)
            advance(grid, params, stream, 0.25)
            if not grid.negativity_flag:
                vals.append(math.log(grid.z[params.origin_index()]))
        out[sig] = np.array(vals)
    v1, v2 = out[1.0].var(ddof=1), out[-1.0].var(ddof=1)
    se = math.sqrt(2.0 / nrep) * (v1 + v2) / 2 * math.sqrt(2)
    assert abs(v1 - v2) < 4 * se


# ---------------------------------------------------------------------------
# coefficient rescaling
# ---------------------------------------------------------------------------


def test_rescale_identity_at_gamma_one():
    assert rescale_params(0.7, 1.3, 1.0, 0.5, 0.5, 1.0) == (0.5, 0.5, 1.0)


def test_rescale_direct_substitution():
    lam, nu, sigma = rescale_params(0.5, 1.5, 4.0, 1.0, 1.0, 1.0)
    assert lam == pytest.approx(4.0)
    assert nu == pytest.approx(2.0)
    assert sigma == pytest.approx(4.0 ** (-0.75))


def test_rescale_nu_invariant_when_beta_two():
    for gamma in (0.3, 2.0, 9.0):
        _, nu, _ = rescale_params(0.0, 2.0, gamma, 0.5, 0.7, 1.0)
        assert nu == pytest.approx(0.7)
    with pytest.raises(ValueError):
        rescale_params(0.0, 2.0, -1.0, 0.5, 0.5, 1.0)


# ---------------------------------------------------------------------------
# ensemble checks (small-scale smoke; full scale lives in acceptance)
# ---------------------------------------------------------------------------


def run_ensemble(params, nrep, seed, t):
    h0_rows = np.empty((nrep, params.ncells))
    ht_rows = np.empty((nrep, params.ncells))
    keep = []
    for r in range(nrep):
        stream = derive_stream(seed, r)
        grid = brownian_initial(params, stream)
        h0_rows[r] = -np.log(grid.z)
        advance(grid, params, stream, t)
        if grid.negativity_flag:
            continue
        ht_rows[r] = -np.log(grid.z)
        keep.append(r)
    keep = np.array(keep)
    return h0_rows[keep], ht_rows[keep]


def test_increment_check_equilibrium():
    params = small_params(half_width=10.0, t_end=0.5)
    h0, ht = run_ensemble(params, 1200, seed=29, t=0.5)
    for rows, label in ((h0, "t=0"), (ht, "t")):
        out = increment_check(rows, params, delta=1.0)
        assert out["variance_pass"], (label, out)
        assert out["disjoint_corr_pass"], (label, out)


def test_increment_check_requires_matched_normalization():
    params = small_params(sigma=2.0)
    with pytest.raises(ValueError, match="normalization"):
        increment_check(np.zeros((10, params.ncells)), params, delta=1.0)


def test_cov_suite_smoke():
    params = small_params(half_width=10.0, t_end=0.5)
    h0, ht = run_ensemble(params, 600, seed=30, t=0.5)
    out = cov_suite(h0, ht, params, x_grid=(0.0, 1.0, -2.0, 4.0), nboot=100)
    for rec in out["records"]:
        assert rec.passed, rec.to_dict()


def test_cov_suite_requires_replicas():
    params = small_params()
    with pytest.raises(ValueError):
        cov_suite(np.zeros((5, params.ncells)), np.zeros((5, params.ncells)), params, (0.0,))
