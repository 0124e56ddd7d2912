from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtrajgeom.action import (
    PhasePoint,
    action_density,
    closed_loop_action_rate,
    corotate,
    corotate_inverse,
    equilibrium_angles,
    equilibrium_point,
    fgh,
    fgh_partials,
    hamilton_rhs,
    hamilton_rhs_array,
    lagrangian_and_measure,
    optimal_r,
    readout_log_density_rate,
    rotating_action_density,
    rotating_hamilton_rhs,
)
from qtrajgeom.bloch import MeasurementProtocol, mean_readout
from qtrajgeom.errors import SingularCoordinate, SingularMeasure

interior = st.floats(0.2, np.pi - 0.2)
azimuth = st.floats(-np.pi, np.pi)
mom = st.floats(-2.0, 2.0)
strength = st.floats(0.02, 1.0)


def _hamiltonian(z, t, Theta, tau):
    pr = MeasurementProtocol(Theta, tau)
    r = optimal_r(z, pr, t)
    return (r * r - 1.0) / (2 * tau)


@settings(max_examples=60)
@given(interior, azimuth, interior, azimuth)
def test_fgh_partials_match_finite_differences(theta, phi, Theta, Phi):
    d = fgh_partials(theta, phi, Theta, Phi)
    eps = 1e-6
    for name, idx in (("f", 0), ("g", 1), ("h", 2)):
        dp = (fgh(theta, phi + eps, Theta, Phi)[idx] - fgh(theta, phi - eps, Theta, Phi)[idx]) / (2 * eps)
        dt = (fgh(theta + eps, phi, Theta, Phi)[idx] - fgh(theta - eps, phi, Theta, Phi)[idx]) / (2 * eps)
        assert d[name + "_phi"] == pytest.approx(dp, abs=1e-6)
        assert d[name + "_theta"] == pytest.approx(dt, abs=1e-6)
    a = lambda th, ph: mean_readout(Theta, Phi, th, ph)
    assert d["a_phi"] == pytest.approx((a(theta, phi + eps) - a(theta, phi - eps)) / (2 * eps), abs=1e-6)
    assert d["a_theta"] == pytest.approx((a(theta + eps, phi) - a(theta - eps, phi)) / (2 * eps), abs=1e-6)


@settings(max_examples=60)
@given(azimuth, interior, mom, mom, st.floats(-0.5, 0.5), interior, strength, st.floats(0, 1))
def test_hamilton_rhs_is_the_gradient_of_the_hamiltonian(phi, theta, pp, pt, pc, Theta, tau, t):
    z = np.array([phi, theta, 0.2, pp, pt, pc])
    dz, r = hamilton_rhs_array(z, t, Theta, tau)
    eps = 1e-6
    grad = np.empty(6)
    for i in range(6):
        e = np.zeros(6); e[i] = eps
        grad[i] = (_hamiltonian(z + e, t, Theta, tau) - _hamiltonian(z - e, t, Theta, tau)) / (2 * eps)
    scale = max(1.0, np.max(np.abs(grad)))
    assert np.allclose(dz[:3], grad[3:], atol=1e-6 * scale)
    assert np.allclose(dz[3:], -grad[:3], atol=1e-6 * scale)
    assert dz[5] == 0.0


def test_chi_gauge_leaves_flow_and_action_unchanged():
    pr = MeasurementProtocol(1.1, 0.2)
    z = np.array([0.3, 1.2, 0.0, 0.4, -0.3, 0.1])
    z2 = z.copy(); z2[2] += 1.7
    assert np.array_equal(hamilton_rhs(z, pr, 0.3), hamilton_rhs(z2, pr, 0.3))
    assert action_density(z, 0.5, pr, 0.3) == action_density(z2, 0.5, pr, 0.3)


def test_singular_coordinates_raise():
    with pytest.raises(SingularCoordinate):
        fgh(0.0, 0.1, 1.0, 0.0)
    pr = MeasurementProtocol(np.pi / 2, 0.1)
    with pytest.raises(SingularMeasure):
        lagrangian_and_measure(1.0, 0.0, 1.0, pr, 0.0)


def test_equilibrium_stationarity_grid():
    for Theta in np.linspace(0.1, np.pi - 0.1, 10):
        for tau in np.linspace(0.02, 0.5, 10):
            pt = corotate(equilibrium_point(Theta, tau).phase_point(), 0.0)
            dz, _ = rotating_hamilton_rhs(pt, Theta, tau)
            # chi is cyclic: its steady rate is the phase accrued per unit time
            assert np.max(np.abs(dz[[0, 1, 3, 4, 5]])) < 1e-10


def test_equilibrium_angle_is_continuous_through_the_equator():
    Th = np.linspace(0.01, np.pi - 0.01, 401)
    th, _ = equilibrium_angles(Th, 0.2)
    assert np.all(np.diff(th) > 0)
    assert equilibrium_angles(np.pi / 2, 0.2)[0] == pytest.approx(np.pi / 2)


@given(azimuth, interior, mom, mom, interior, strength, st.floats(0, 1), st.floats(-3, 3),
       st.floats(-3, 3), st.floats(-3, 3))
def test_lab_and_rotating_actions_agree(phi, theta, pp, pt, Theta, tau, t, r, phid, thd):
    lab = PhasePoint(phi, theta, 0.0, pp, pt, 0.0)
    rot = corotate(lab, t)
    pr = MeasurementProtocol(Theta, tau)
    a = action_density(lab, r, pr, t, qdot=(phid, thd, 0.0))
    b = rotating_action_density(rot, r, tau, Theta, qdot=(2 * np.pi - phid, thd))
    assert a == pytest.approx(b, abs=1e-10)
    assert action_density(lab, r, pr, t) == pytest.approx(rotating_action_density(rot, r, tau, Theta),
                                                          abs=1e-10)
    back = corotate_inverse(rot, t)
    assert back.phi == pytest.approx(phi) and back.p_phi == pytest.approx(pp)


@pytest.mark.parametrize("tau", [0.05, 0.1, 0.2])
def test_equilibrium_loop_action(tau):
    N = 1000
    pr = MeasurementProtocol(np.pi / 2, tau, 1.0, N)
    eq = equilibrium_point(np.pi / 2, tau).phase_point()
    vals = []
    for t in pr.times:
        z = np.array([eq.phi + 2 * np.pi * t, eq.theta, 0.0, eq.p_phi, eq.p_theta, eq.p_chi])
        vals.append(action_density(z, optimal_r(z, pr, t), pr, t))
    S = np.trapezoid(vals, pr.times)
    assert S == pytest.approx(-2 * np.pi ** 2 * tau, abs=1e-8)
    assert closed_loop_action_rate(np.pi / 2, tau) == pytest.approx(-2 * np.pi ** 2 * tau, rel=1e-14)


@settings(max_examples=60)
@given(interior, azimuth, st.floats(0.3, 2.5), strength, st.floats(0.0, 1.0), st.floats(-3, 3))
def test_lagrangian_matches_readout_weight(theta, phi, Theta, tau, t, phid):
    # eliminating r through phi' = -(r / tau) f must reproduce the readout weight
    pr = MeasurementProtocol(Theta, tau)
    Phi = pr.Phi(t)
    if abs(np.sin(phi - Phi)) < 0.05:
        return
    f, g, h = fgh(theta, phi, Theta, Phi)
    r = -tau * phid / f
    terms = lagrangian_and_measure(theta, phi, phid, pr, t)
    a = mean_readout(Theta, Phi, theta, phi)
    scale = max(1.0, abs(terms.lagrangian))
    assert terms.lagrangian == pytest.approx(readout_log_density_rate(r, a, tau), abs=1e-8 * scale)
    assert terms.theta_dot == pytest.approx(r / tau * g, abs=1e-8 * max(1.0, abs(r / tau)))
    assert terms.measure > 0
