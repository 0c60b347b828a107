import math

import numpy as np
import pytest

from kpzlab import _kernels
from kpzlab.coupling import (
    DisplacementSample,
    advance_coupled,
    characteristic_speed,
    displacement_moment,
    estimate_S,
    flux,
    init_discrepancy,
)
from kpzlab.rng import derive_stream
from kpzlab.stats import moment_of_histogram
from kpzlab.wasep import WasepParams, buffer_half_width


def make_params(eps=0.04, rho=0.5, L=64):
    return WasepParams(eps=eps, rho=rho, half_width=L)


# ---------------------------------------------------------------------------
# flux and characteristic speed
# ---------------------------------------------------------------------------


def test_flux_values():
    assert flux(0.0, 0.04) == 0.0
    assert flux(1.0, 0.04) == 0.0
    assert flux(0.5, 0.04) == pytest.approx(-0.05)


def test_characteristic_speed_values_and_flux_derivative():
    assert characteristic_speed(0.5, 0.1) == 0.0
    assert characteristic_speed(0.25, 0.04) == pytest.approx(-0.1)
    assert characteristic_speed(0.75, 0.16) == pytest.approx(0.2)
    # cross-check against a centered finite difference of the flux
    for rho, eps in ((0.25, 0.04), (0.75, 0.16), (0.3, 0.2)):
        h = 1e-6
        fd = (flux(rho + h, eps) - flux(rho - h, eps)) / (2 * h)
        assert characteristic_speed(rho, eps) == pytest.approx(fd, abs=1e-8)


def test_speed_flux_validation():
    with pytest.raises(ValueError):
        flux(-0.1, 0.04)
    with pytest.raises(ValueError):
        characteristic_speed(0.5, 0.3)


# ---------------------------------------------------------------------------
# initial discrepancy
# ---------------------------------------------------------------------------


def test_init_discrepancy_origin():
    for sid in range(5):
        pair = init_discrepancy(make_params(), derive_stream(10, sid))
        assert pair.second_class_pos == 0
        assert pair.tri_state[pair.half_width] == 2
        assert (pair.tri_state == 2).sum() == 1


def test_init_discrepancy_rho_zero():
    pair = init_discrepancy(make_params(rho=0.0), derive_stream(10, 0))
    assert (pair.tri_state == 1).sum() == 0


def test_init_discrepancy_density():
    L = 10**5
    pair = init_discrepancy(make_params(rho=0.5, L=L), derive_stream(10, 1))
    frac = (pair.tri_state == 1).sum() / (2 * L)  # origin excluded
    assert abs(frac - 0.5) < 5 * 0.5 / math.sqrt(2 * L)


def test_upper_lower_collapse():
    pair = init_discrepancy(make_params(L=16), derive_stream(10, 2))
    upper = pair.upper().occupation
    lower = pair.lower().occupation
    diff = upper.astype(int) - lower.astype(int)
    assert diff.sum() == 1
    assert np.flatnonzero(diff)[0] - 16 == pair.second_class_pos
    assert np.all(lower <= upper)


# ---------------------------------------------------------------------------
# coupled dynamics
# ---------------------------------------------------------------------------


def test_advance_coupled_noop():
    params = make_params(L=32)
    pair = init_discrepancy(params, derive_stream(11, 0))
    before = pair.tri_state.copy()
    advance_coupled(pair, params, derive_stream(11, 0), 0.0)
    np.testing.assert_array_equal(pair.tri_state, before)


def test_single_discrepancy_invariant():
    params = make_params(eps=0.2, L=128)
    stream = derive_stream(11, 1)
    pair = init_discrepancy(params, stream)
    for t in (5.0, 25.0, 60.0):
        advance_coupled(pair, params, stream, t)
        assert (pair.tri_state == 2).sum() == 1
        pos = int(np.flatnonzero(pair.tri_state == 2)[0]) - params.half_width
        assert pos == pair.second_class_pos


def test_coupled_marginals_match_two_lattice_replay_bitwise():
    # the tri-state chain must agree with two plain exclusion lattices
    # driven by the identical shared event randomness
    params = make_params(eps=0.2, L=96)
    seed = (12, 7)
    pair = init_discrepancy(params, derive_stream(*seed))
    upper0 = pair.upper().occupation.copy()
    lower0 = pair.lower().occupation.copy()

    stream_pair = derive_stream(*seed)
    T = 40.0
    advance_coupled(pair, params, stream_pair, T)

    p_ratio = params.p / (params.p + params.q)
    inv_lam = 1.0 / params.total_rate
    counts = np.zeros(params.nbonds, dtype=np.int64)
    up_state = derive_stream(*seed).kernel_state  # identical event stream
    lo_state = up_state.copy()
    _kernels.exclusion_advance(upper0, counts, up_state, 0.0, T, p_ratio, inv_lam, params.nbonds)
    _kernels.exclusion_advance(lower0, counts, lo_state, 0.0, T, p_ratio, inv_lam, params.nbonds)

    np.testing.assert_array_equal(pair.upper().occupation, upper0)
    np.testing.assert_array_equal(pair.lower().occupation, lower0)


def test_second_class_free_walk_at_rho_zero():
    # with no first-class particles the discrepancy is a free (p, q) walker
    eps, T, nrep = 0.04, 50.0, 4000
    L = buffer_half_width(0, T, eps)
    params = make_params(eps=eps, rho=0.0, L=L)
    finals = np.empty(nrep)
    for r in range(nrep):
        stream = derive_stream(13, r)
        pair = init_discrepancy(params, stream)
        advance_coupled(pair, params, stream, T)
        assert not pair.invalid
        finals[r] = pair.second_class_pos
    drift = (params.p - params.q) * T
    se = finals.std(ddof=1) / math.sqrt(nrep)
    assert abs(finals.mean() - drift) < 4 * se


def test_mean_speed_zero_at_half_density():
    eps, T, nrep = 0.04, 100.0, 3000
    L = buffer_half_width(0, T, eps)
    params = make_params(eps=eps, rho=0.5, L=L)
    finals = np.empty(nrep)
    for r in range(nrep):
        stream = derive_stream(14, r)
        pair = init_discrepancy(params, stream)
        advance_coupled(pair, params, stream, T)
        finals[r] = pair.second_class_pos
    se = finals.std(ddof=1) / math.sqrt(nrep)
    assert abs(finals.mean() - 0.0) < 4 * se


def test_boundary_hit_flags_invalid():
    params = make_params(eps=0.2, rho=0.0, L=4)  # tiny lattice, walker escapes fast
    stream = derive_stream(15, 0)
    pair = init_discrepancy(params, stream)
    advance_coupled(pair, params, stream, 500.0)
    assert pair.invalid
    with pytest.raises(RuntimeError):
        advance_coupled(pair, params, stream, 600.0)


# ---------------------------------------------------------------------------
# displacement moments and the correlation histogram
# ---------------------------------------------------------------------------


def test_displacement_moment_trivial_cases():
    mk = lambda c: DisplacementSample(t_micro=1.0, position=0, centered=c)  # noqa: E731
    est, se = displacement_moment([mk(0.0)] * 8, 2.0)
    assert est == 0.0 and se == 0.0
    est, se = displacement_moment([mk(-1.0), mk(1.0)] * 4, 2.0)
    assert est == 1.0 and se == 0.0


def test_displacement_moment_half_normal():
    rng = np.random.default_rng(16)
    sigma = 3.0
    vals = rng.normal(0, sigma, 20_000)
    samples = [DisplacementSample(t_micro=2.0, position=0, centered=c) for c in vals]
    est, se = displacement_moment(samples, 1.0)
    want = sigma * math.sqrt(2.0 / math.pi)
    assert abs(est - want) < 4 * se


def test_displacement_moment_errors():
    with pytest.raises(ValueError):
        displacement_moment([], 1.0)
    bad = [
        DisplacementSample(t_micro=1.0, position=0, centered=0.0),
        DisplacementSample(t_micro=2.0, position=0, centered=0.0),
    ]
    with pytest.raises(ValueError):
        displacement_moment(bad, 1.0)


def test_estimate_S_point_mass():
    eps, t_macro = 0.2, 1.0
    t_micro = t_macro / eps**2
    samples = [DisplacementSample(t_micro=t_micro, position=0, centered=0.0)] * 50
    h = estimate_S(samples, eps, t_macro)
    assert h.density[0] == pytest.approx(1.0 / eps)
    assert h.mass.sum() == 1.0
    assert moment_of_histogram(h, 2.0) == 0.0


def test_estimate_S_reflection_exact():
    eps, t_macro = 0.2, 1.0
    t_micro = t_macro / eps**2
    rng = np.random.default_rng(17)
    pos = rng.integers(-10, 25, 400)
    mk = lambda p: DisplacementSample(t_micro=t_micro, position=int(p), centered=float(p))  # noqa: E731
    h = estimate_S([mk(p) for p in pos], eps, t_macro)
    hr = estimate_S([mk(-p) for p in pos], eps, t_macro)
    assert h.reflected().tv_distance(hr) == 0.0


def test_estimate_S_requires_half_density_and_matching_time():
    samples = [DisplacementSample(t_micro=25.0, position=0, centered=0.0)]
    with pytest.raises(ValueError, match="density"):
        estimate_S(samples, 0.2, 1.0, rho=0.3)
    with pytest.raises(ValueError, match="micro time"):
        estimate_S(samples, 0.2, 2.0)
