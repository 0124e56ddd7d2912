from __future__ import annotations

import dataclasses
import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtrajgeom import corrections as gc
from qtrajgeom.bloch import TWO_PI
from qtrajgeom.errors import ConjugatePoint, DegenerateClock, NotConverged


def u_T_closed(tau):
    return 4 * np.pi ** 2 * tau / (4 * np.pi ** 2 * tau ** 2 + 1)


def gy_closed(tau):
    k = np.sqrt(4 * np.pi ** 2 * tau ** 2 + 1)
    return tau * np.sinh(k / tau) / k


@functools.lru_cache(maxsize=None)
def _cache():
    cache = gc.NonwindingCache()
    cache.populate([0.3, 0.2, 0.1, 0.05, 0.02])
    return cache


def test_clock_on_equilibrium_loop():
    path = gc.equilibrium_path(0.1)
    u, u_T = gc.reparameterize_time(path)
    assert u_T == pytest.approx(2.830432, abs=1e-6)
    assert abs(u_T - u_T_closed(0.1)) < 1e-10
    assert u[0] == 0.0 and np.all(np.diff(u) > 0)
    assert np.allclose(u, u_T * path.times, atol=1e-12)


def test_clock_vanishes_at_weak_measurement():
    u_T = [gc.reparameterize_time(gc.equilibrium_path(t, N=200))[1] for t in (1.0, 10.0, 100.0)]
    assert np.all(np.diff(u_T) < 0) and u_T[-1] < 0.011


def test_degenerate_clock():
    t = np.linspace(0.0, 1.0, 101)
    frozen = gc.EquatorPath(0.1, t, TWO_PI * t, np.zeros_like(t), 0.0, 1)
    with pytest.raises(DegenerateClock):
        gc.reparameterize_time(frozen)


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.5])
def test_zeta_determinant_closed_form(tau):
    _, u_T = gc.reparameterize_time(gc.equilibrium_path(tau))
    assert gc.zeta_determinant(u_T) == pytest.approx(u_T_closed(tau), rel=1e-6)


def test_zeta_determinant_trivial():
    assert gc.zeta_determinant(1.0) == 1.0
    assert gc.zeta_determinant(u_T_closed(0.1)) == u_T_closed(0.1)


def _equator_hamiltonian(phi, p, t, tau):
    y = TWO_PI * t - phi
    r = np.cos(y) + p * np.sin(y)
    return (r * r - 1) / (2 * tau)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 1), st.floats(0.02, 1.0))
def test_hessian_blocks_match_finite_differences(phi, p, t, tau):
    H = functools.partial(_equator_hamiltonian, t=t, tau=tau)
    e = 1e-4
    H_pp = (H(phi, p + e) - 2 * H(phi, p) + H(phi, p - e)) / e ** 2
    H_ff = (H(phi + e, p) - 2 * H(phi, p) + H(phi - e, p)) / e ** 2
    H_pf = (H(phi + e, p + e) - H(phi + e, p - e) - H(phi - e, p + e) + H(phi - e, p - e)) / (4 * e * e)
    A, B, Hff = gc._hessian_blocks(phi, p, t, tau, 1.0)
    scale = (1 + p * p) / tau
    assert abs(A - H_pf) < 1e-6 * scale
    assert abs(B - H_pp) < 1e-6 * scale
    assert abs(Hff - H_ff) < 1e-6 * scale


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.5])
def test_gelfand_yaglom_closed_form(tau):
    sv = gc.second_variation(gc.equilibrium_path(tau))
    assert gc.gelfand_yaglom(sv) == pytest.approx(gy_closed(tau), rel=1e-6)
    # independent route: f'' = V f integrated directly in the clock
    assert gc.gelfand_yaglom_potential(sv) == pytest.approx(gy_closed(tau), rel=1e-6)
    if tau == 0.5:
        assert gc.gelfand_yaglom(sv) == pytest.approx(55.4, abs=0.05)


def _free_operator(u_T=2.0, n=2001):
    t = np.linspace(0.0, 1.0, n)
    sv = gc.second_variation(gc.equilibrium_path(0.1, N=n - 1))
    return dataclasses.replace(sv, u_grid=u_T * t, u_T=u_T, V=np.zeros(n))


def test_free_operator_ratios():
    sv = _free_operator()
    assert gc.gelfand_yaglom_potential(sv) == pytest.approx(1.0, abs=1e-12)
    rep = gc.eigen_det_ratio(sv)
    assert rep.ratio == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(rep.eigenvalues, rep.free_eigenvalues)


def test_free_dirichlet_spectrum():
    u_T, n_grid = 2.0, 2048
    rep = gc.eigen_det_ratio(_free_operator(u_T), N=64, n_grid=n_grid)
    i = np.arange(1, 65)
    exact = (np.pi * i / u_T) ** 2
    h = u_T / n_grid
    # second-order central differences: relative error (pi i h)^2 / (12 u_T^2)
    bound = (np.pi * i * h / u_T) ** 2 / 12 * 1.01
    assert np.all(np.abs(rep.free_eigenvalues / exact - 1) <= bound)


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.5])
def test_eigen_ratio_matches_gelfand_yaglom_on_winding_loop(tau):
    sv = gc.second_variation(gc.equilibrium_path(tau))
    rep = gc.eigen_det_ratio(sv, N=64, n_grid=2048)
    assert rep.ratio == pytest.approx(gc.gelfand_yaglom(sv), rel=0.01)
    assert rep.ratio_half == pytest.approx(rep.ratio, rel=0.01)


def test_eigen_ratio_rejects_small_truncation():
    with pytest.raises(ValueError):
        gc.eigen_det_ratio(gc.second_variation(gc.equilibrium_path(0.1)), N=4)


def test_eigen_ratio_reports_nonconvergence():
    sv = gc.second_variation(gc.equilibrium_path(0.1))
    with pytest.raises(NotConverged) as err:
        gc.eigen_det_ratio(sv, N=8, n_grid=64, tol=1e-12)
    assert err.value.estimate is not None


def test_conjugate_point_reported():
    # a constant-angle path with y = pi/3, p = 0 has an oscillating Jacobi field
    t = np.linspace(0.0, 1.0, 2001)
    path = gc.EquatorPath(0.05, t, TWO_PI * t - np.pi / 3, np.zeros_like(t), 0.0, 1)
    with pytest.raises(ConjugatePoint):
        gc.log_gelfand_yaglom(gc.second_variation(path))


@pytest.mark.parametrize("tau", [0.3, 0.2, 0.1, 0.05, 0.02])
def test_no_conjugate_points_on_either_branch(tau):
    wind = gc.branch_correction(gc.equilibrium_path(tau))
    non = gc.branch_correction(gc.EquatorPath.from_branch(_cache().get(tau)))
    assert wind.det_ratio > 0 and np.isfinite(non.log_det_ratio)


@pytest.mark.parametrize("tau", [0.3, 0.1, 0.02])
def test_determinant_methods_agree_on_both_branches(tau):
    for path in (gc.equilibrium_path(tau), gc.EquatorPath.from_branch(_cache().get(tau))):
        sv = gc.second_variation(path)
        assert gc.eigen_det_ratio(sv).ratio == pytest.approx(gc.gelfand_yaglom(sv), rel=0.01)


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.5])
def test_winding_corrected_probability_closed_form(tau):
    bc = gc.branch_correction(gc.equilibrium_path(tau))
    k2 = 4 * np.pi ** 2 * tau ** 2 + 1
    log_ref = -2 * np.pi ** 2 * tau - 0.5 * np.log(
        4 * np.pi ** 2 * tau ** 2 * np.sinh(np.sqrt(k2) / tau) / k2 ** 1.5)
    assert np.exp(bc.log_corrected - log_ref) == pytest.approx(1.0, rel=1e-6)


def test_corrected_ratio_report_is_consistent():
    rep = gc.corrected_transition_ratio(0.1, _cache())
    assert rep.R > 0 and rep.R_saddle > 0
    assert rep.R_saddle == pytest.approx(gc.saddle_ratio(0.1, _cache()), rel=1e-12)
    assert np.log(rep.R) == pytest.approx(rep.winding.log_corrected - rep.nonwinding.log_corrected)
    assert rep.winding.det_zeta == pytest.approx(u_T_closed(0.1), rel=1e-9)


def test_saddle_ratio_crosses_one_near_equator_tau_c():
    assert gc.saddle_ratio(0.1, _cache()) > 1 > gc.saddle_ratio(0.2, _cache())


def test_cache_continues_to_new_strengths():
    cache = gc.NonwindingCache()
    cache.populate([0.3])
    sol = cache.get(0.25)
    assert sol.converged and sol.winding == 0 and 0.25 in cache.solutions
