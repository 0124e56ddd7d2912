from __future__ import annotations

import functools

import numpy as np
import pytest

from qtrajgeom import optimal as opt
from qtrajgeom.action import (
    closed_loop_action_rate,
    equilibrium_angles,
    equilibrium_momenta,
    hamilton_rhs_array,
    optimal_r,
)
from qtrajgeom.bloch import TWO_PI, MeasurementProtocol
from qtrajgeom.errors import BranchLost, NoConvergence


def hamilton_residual(sol) -> float:
    """Sup-norm of (q', p') - RHS along a path, derivatives by a 5-point stencil."""
    z = np.stack([sol.phi, sol.theta, sol.chi, sol.p_phi, sol.p_theta,
                  np.full_like(sol.phi, sol.p_chi)], axis=-1)
    h = sol.times[1] - sol.times[0]
    dz = (-z[4:] + 8 * z[3:-1] - 8 * z[1:-3] + z[:-4]) / (12 * h)
    rhs = np.array([hamilton_rhs_array(z[k], sol.times[k], sol.Theta, sol.tau)[0]
                    for k in range(2, len(z) - 2)])
    return float(np.max(np.abs(dz - rhs)))


def test_boundary_condition_validation():
    with pytest.raises(ValueError):
        opt.BoundaryCondition(1.0, 0.0, final="open")
    with pytest.raises(ValueError):
        opt.BoundaryCondition(1.0, 0.0, final="fixed")
    with pytest.raises(ValueError):
        opt.BoundaryCondition(1.0, 0.0, winding=0.5)
    assert opt.BoundaryCondition(1.0, 0.2, winding=1).target() == (1.0, 0.2 + TWO_PI)


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.3])
def test_equator_winding_loop_is_the_equilibrium_trajectory(tau):
    sol = opt.solve_equator(tau, 1)
    exact = TWO_PI * sol.times - np.arctan(TWO_PI * tau)
    assert sol.shooting_residual < 1e-9
    assert np.max(np.abs(sol.phi - exact)) < 1e-9
    assert sol.action == pytest.approx(-2 * np.pi ** 2 * tau, abs=1e-8)
    assert sol.geometric_phase == pytest.approx(-np.pi, abs=1e-9)


def test_general_solver_reproduces_equator_loop():
    tau = 0.1
    th_e, ph_e = equilibrium_angles(np.pi / 2, tau)
    pr = MeasurementProtocol(np.pi / 2, tau, 1.0, 1000)
    sol = opt.solve_bvp(pr, opt.BoundaryCondition(float(th_e), float(ph_e), winding=1),
                        (TWO_PI * tau + 0.05, 0.0))
    assert sol.converged and sol.shooting_residual < 1e-9
    assert np.max(np.abs(sol.phi - (TWO_PI * sol.times + ph_e))) < 1e-8
    assert sol.action == pytest.approx(-2 * np.pi ** 2 * tau, abs=1e-8)


@pytest.mark.parametrize("Theta", [0.4, 1.0, 2.3])
def test_equilibrium_branch_matches_closed_forms(Theta):
    tau = 0.2
    sol = opt.equilibrium_branch(Theta, tau)
    th_e, ph_e = equilibrium_angles(Theta, tau)
    assert np.max(np.abs(sol.theta - th_e)) < 1e-8
    assert np.max(np.abs(sol.phi - (ph_e + TWO_PI * sol.times))) < 1e-8
    assert sol.geometric_phase == pytest.approx(opt.chi_n1_closed(Theta, tau), abs=1e-8)
    assert sol.density == pytest.approx(opt.p_n1_closed(Theta, tau), rel=1e-8)
    pr = MeasurementProtocol(Theta, tau, 1.0, len(sol.times) - 1)
    for k in range(0, len(sol.times), 97):
        z = np.array([sol.phi[k], sol.theta[k], sol.chi[k], sol.p_phi[k], sol.p_theta[k], sol.p_chi])
        assert sol.r[k] == pytest.approx(optimal_r(z, pr, sol.times[k]), abs=1e-10)


def test_closed_form_limits():
    assert opt.chi_n1_closed(np.pi / 2, 0.3) == pytest.approx(-np.pi)
    Th = np.linspace(0.1, 3.0, 9)
    assert np.allclose(opt.chi_n1_closed(Th, 1e-9), -TWO_PI * np.sin(Th / 2) ** 2, atol=1e-7)
    assert opt.p_n1_closed(1.0, 1e-9) == pytest.approx(1.0, abs=1e-7)


@pytest.mark.slow
def test_track_branch_follows_winding_family_across_the_equator():
    tau = 0.15
    Thetas = np.linspace(1.2, 2.0, 41)
    seed = opt.equilibrium_branch(1.18, tau, N=400)
    prs = [MeasurementProtocol(float(Th), tau, 1.0, 400) for Th in Thetas]
    bcs = []
    for Th in Thetas:
        th_e, ph_e = equilibrium_angles(Th, tau)
        bcs.append(opt.BoundaryCondition(float(th_e), float(ph_e), winding=1,
                                         p_chi=float(equilibrium_momenta(Th, tau)[2])))
    sols = opt.track_branch(prs, bcs, seed)
    for Th, s in zip(Thetas, sols):
        assert s.converged
        assert np.max(np.abs(s.theta - equilibrium_angles(Th, tau)[0])) < 1e-7
        assert s.action == pytest.approx(closed_loop_action_rate(Th, tau), abs=1e-7)


def test_track_branch_reports_last_good_point():
    tau = 0.15
    seed = opt.equilibrium_branch(1.0, tau, N=200)
    pr = MeasurementProtocol(1.0, tau, 1.0, 200)
    th_e, ph_e = equilibrium_angles(1.0, tau)
    # a closed loop with an absurd phase momentum has no extremal nearby
    bad = opt.BoundaryCondition(float(th_e), float(ph_e), winding=1, p_chi=1e3)
    with pytest.raises(BranchLost) as err:
        opt.track_branch([pr], [bad], seed)
    assert err.value.last_good is seed


def test_extremality_along_converged_paths():
    paths = [opt.solve_equator(0.1, 1), opt.solve_equator(0.3, 0, -0.17),
             opt.equilibrium_branch(1.0, 0.2)]
    for s in paths:
        assert hamilton_residual(s) < 1e-7


def test_detect_jumps():
    x = np.linspace(0, 1, 50)
    smooth = np.sin(x)
    assert opt.detect_jumps(x, smooth) == []
    stepped = smooth + np.where(x > 0.5, 2.0, 0.0)
    assert opt.detect_jumps(x, stepped) == [int(np.flatnonzero(x > 0.5)[0]) - 1]


def test_optimal_phase_on_the_equator():
    strong = opt.optimal_geometric_phase(np.pi / 2, 0.05)
    assert strong.winning_branch == 1 and strong.chi == pytest.approx(-np.pi)
    weak = opt.optimal_geometric_phase(np.pi / 2, 0.3)
    assert weak.winning_branch == 0 and weak.chi == pytest.approx(0.0, abs=1e-12)


def test_optimal_phase_mirror_symmetry():
    north = opt.optimal_geometric_phase(1.2, 0.2)
    south = opt.optimal_geometric_phase(np.pi - 1.2, 0.2)
    assert north.winning_branch == south.winning_branch
    if north.winning_branch == 0:
        assert south.chi == pytest.approx(-north.chi, abs=1e-10)
    else:
        assert south.chi == pytest.approx(opt.chi_n1_closed(np.pi - 1.2, 0.2))


@pytest.mark.slow
def test_nonwinding_equator_branch_converges_everywhere():
    taus = np.linspace(0.5, 0.02, 50)
    sols = opt.equator_nonwinding_branch(taus)
    assert all(s.converged for s in sols)
    assert max(s.shooting_residual for s in sols) < 1e-9
    assert all(s.winding == 0 for s in sols)
    # the branch is smooth: the action is monotone in the strength
    assert np.all(np.diff([s.action for s in sols]) < 0)


@pytest.mark.slow
def test_action_gap_changes_sign_once():
    taus = np.linspace(0.02, 0.5, 100)
    sols = opt.equator_nonwinding_branch(taus)
    gap = -2 * np.pi ** 2 * taus - np.array([s.action for s in sols])
    assert np.count_nonzero(np.sign(gap[:-1]) != np.sign(gap[1:])) == 1


def test_tau_c_equator_equalizes_densities():
    tau_c = opt.find_tau_c_equator()
    assert 0.10 <= tau_c <= 0.12
    p0 = opt.solve_equator(tau_c, 0, -0.17).density
    assert opt.p_n1_closed(np.pi / 2, tau_c) == pytest.approx(p0, rel=1e-6)


@functools.lru_cache(maxsize=None)
def _nonwinding_actions():
    taus = (0.5, 0.2, 0.05)
    return {t: s.action for t, s in zip(taus, opt.equator_nonwinding_branch(taus))}


@pytest.mark.parametrize("tau", [0.05, 0.2, 0.5])
def test_higher_windings_are_suppressed(tau):
    # locate every |n| = 2 equator loop by a dense momentum scan
    p = np.linspace(-30, 30, 6001)
    phi_e = -np.arctan(TWO_PI * tau)
    end = opt.equator_flow(p, tau)["phi"]
    S_ref = [-2 * np.pi ** 2 * tau, _nonwinding_actions()[tau]]
    found = 0
    for n in (-2, 2):
        F = (end - phi_e) / TWO_PI - n
        ok = np.isfinite(F[:-1]) & np.isfinite(F[1:]) & (np.abs(F[1:] - F[:-1]) < 0.5)
        for i in np.flatnonzero(ok & (np.sign(F[:-1]) != np.sign(F[1:]))):
            try:
                s = opt.solve_equator(tau, n, 0.5 * (p[i] + p[i + 1]), fallback=False)
            except NoConvergence:
                continue
            found += 1
            assert s.action < min(S_ref)
    assert found > 0


def test_latitude_nonwinding_family_leaves_sector_above_tau_c():
    # continued toward strong measurement at Theta = 0.9, the non-winding
    # family crosses the pole into the winding sector before tau_c
    Theta = 0.9
    roots = opt._seed_nonwinding(Theta, [0.3], 400, 1.0)[0]
    assert roots
    probs, _ = opt._closed_problems([Theta], [0.3], 400, 1.0)
    seed = opt._solution_from_shot(probs, np.array([roots[0]]), np.zeros(1), np.ones(1, bool), 0)[0]
    taus = np.arange(0.295, 0.1, -0.005)
    prs = [MeasurementProtocol(Theta, float(t), 1.0, 400) for t in taus]
    bcs = [opt.BoundaryCondition(*map(float, equilibrium_angles(Theta, t)), winding=0) for t in taus]
    with pytest.raises(BranchLost) as err:
        opt.track_branch(prs, bcs, seed)
    last = err.value.last_good
    assert last.tau > 0.12
    assert last.theta.min() < 0.05


def test_theta_scan_at_weak_measurement_flags_no_merge_on_equator():
    scan = opt.scan_theta_jump(0.3, Thetas=np.linspace(np.pi / 2, 1.3, 8))
    assert scan.winner[0] == 0
    assert scan.chi_opt[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(scan.action_n0))
