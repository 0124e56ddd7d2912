"""Phase-augmented stochastic action and its Hamilton equations.

Coordinates are ``q = (phi, theta, chi)`` with conjugate momenta
``p = (p_phi, p_theta, p_chi)``.  With ``x = phi - Phi`` the back-action
functions are

    f = sin(Theta) sin(x) / sin(theta)
    g = cos(theta) sin(Theta) cos(x) - sin(theta) cos(Theta)
    h = tan(theta/2) sin(Theta) sin(x)

and the equations of motion read ``phi' = -(r/tau) f``,
``theta' = (r/tau) g``, ``chi' = (r/2tau) h``.

Sign convention: the action ``S`` is the log of the path probability
density, so a path has density ``exp(S)``.  With this convention the
closed equilibrium loop on the equator has ``S = -2 pi^2 tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .bloch import TWO_PI, MeasurementProtocol, mean_readout
from .errors import SingularCoordinate, SingularMeasure


@dataclass(frozen=True)
class PhasePoint:
    phi: float
    theta: float
    chi: float = 0.0
    p_phi: float = 0.0
    p_theta: float = 0.0
    p_chi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, z) -> "PhasePoint":
        return cls(*map(float, z))


@dataclass(frozen=True)
class EquilibriumPoint:
    theta_e: float
    phi_e: float
    Theta: float
    tau: float

    def momenta(self, T: float = 1.0) -> tuple[float, float, float]:
        """Lab-frame momenta that make the co-rotating flow stationary."""
        return equilibrium_momenta(self.Theta, self.tau, T)

    def phase_point(self, T: float = 1.0) -> PhasePoint:
        pp, pt, pc = self.momenta(T)
        return PhasePoint(self.phi_e, self.theta_e, 0.0, pp, pt, pc)


@dataclass(frozen=True)
class LagrangianTerms:
    lagrangian: float
    measure: float
    theta_dot: float
    chi_dot: float


def _check_theta(theta):
    st = np.sin(theta)
    if np.any(np.abs(st) < 1e-15):
        raise SingularCoordinate("theta at a pole; f is undefined")
    if np.any(np.abs(np.cos(np.asarray(theta) / 2)) < 1e-15):
        raise SingularCoordinate("theta = pi; h is undefined")


def fgh(theta, phi, Theta, Phi):
    _check_theta(theta)
    x = np.asarray(phi) - Phi
    sT = np.sin(Theta)
    f = sT * np.sin(x) / np.sin(theta)
    g = np.cos(theta) * sT * np.cos(x) - np.sin(theta) * np.cos(Theta)
    h = np.tan(np.asarray(theta) / 2) * sT * np.sin(x)
    return f, g, h


def fgh_partials(theta, phi, Theta, Phi) -> dict:
    """Values and first partial derivatives of f, g, h and the mean readout."""
    _check_theta(theta)
    x = np.asarray(phi) - Phi
    sT, cT = np.sin(Theta), np.cos(Theta)
    s, c = np.sin(theta), np.cos(theta)
    sx, cx = np.sin(x), np.cos(x)
    t2 = np.tan(np.asarray(theta) / 2)
    g = c * sT * cx - s * cT
    return {
        "f": sT * sx / s,
        "f_phi": sT * cx / s,
        "f_theta": -sT * sx * c / s ** 2,
        "g": g,
        "g_phi": -c * sT * sx,
        "g_theta": -s * sT * cx - c * cT,
        "h": t2 * sT * sx,
        "h_phi": t2 * sT * cx,
        "h_theta": sT * sx / (2 * np.cos(np.asarray(theta) / 2) ** 2),
        "a": c * cT + s * sT * cx,
        "a_phi": -s * sT * sx,
        "a_theta": g,
    }


def readout_log_density_rate(r, a, tau):
    """Per-unit-time log weight ``(r (2a - r) - 1) / 2 tau`` of a readout."""
    return (r * (2 * a - r) - 1.0) / (2 * tau)


def _unpack(point):
    if isinstance(point, PhasePoint):
        return point.as_array()
    return np.asarray(point, dtype=float)


def optimal_r(point, protocol: MeasurementProtocol, t: float):
    z = _unpack(point)
    phi, theta, _, pp, pt, pc = np.moveaxis(z, -1, 0)
    f, g, h = fgh(theta, phi, protocol.Theta, protocol.Phi(t))
    a = mean_readout(protocol.Theta, protocol.Phi(t), theta, phi)
    return 0.5 * pc * h - pp * f + pt * g + a


def action_density(point, r, protocol: MeasurementProtocol, t: float, qdot=None):
    """Integrand of the stochastic action.

    Without ``qdot`` the constraint terms ``p . (q' - F)`` are taken on shell
    and vanish, leaving the readout log weight.
    """
    z = _unpack(point)
    phi, theta, _, pp, pt, pc = np.moveaxis(z, -1, 0)
    Phi = protocol.Phi(t)
    a = mean_readout(protocol.Theta, Phi, theta, phi)
    val = readout_log_density_rate(r, a, protocol.tau)
    if qdot is not None:
        f, g, h = fgh(theta, phi, protocol.Theta, Phi)
        k = r / protocol.tau
        phid, thd, chd = qdot
        val = (val - pt * (thd - k * g) - pp * (phid + k * f)
               - pc * (chd - 0.5 * k * h))
    return val


def hamilton_rhs_array(z, t, Theta, tau, T=1.0):
    """Vectorized lab-frame Hamilton flow.

    ``z[..., :] = (phi, theta, chi, p_phi, p_theta, p_chi)``.  Returns the
    time derivative with the same layout and the optimal readout.
    """
    z = np.asarray(z, dtype=float)
    phi, theta, _, pp, pt, pc = np.moveaxis(z, -1, 0)
    d = fgh_partials(theta, phi, Theta, TWO_PI * t / T)
    r = 0.5 * pc * d["h"] - pp * d["f"] + pt * d["g"] + d["a"]
    k = r / tau
    out = np.empty_like(z)
    out[..., 0] = -k * d["f"]
    out[..., 1] = k * d["g"]
    out[..., 2] = 0.5 * k * d["h"]
    out[..., 3] = k * (pp * d["f_phi"] - pt * d["g_phi"] - 0.5 * pc * d["h_phi"] - d["a_phi"])
    out[..., 4] = k * (pp * d["f_theta"] - pt * d["g_theta"] - 0.5 * pc * d["h_theta"]
                       - d["a_theta"])
    out[..., 5] = 0.0
    return out, r


def hamilton_rhs(point, protocol: MeasurementProtocol, t: float):
    dz, _ = hamilton_rhs_array(_unpack(point), t, protocol.Theta, protocol.tau, protocol.T)
    return dz


def corotate(point: PhasePoint, t: float, T: float = 1.0) -> PhasePoint:
    Phi = TWO_PI * t / T
    return PhasePoint(Phi - point.phi, point.theta, point.chi,
                      -point.p_phi, point.p_theta, point.p_chi)


def corotate_inverse(point: PhasePoint, t: float, T: float = 1.0) -> PhasePoint:
    # the map is an involution up to the shift by Phi(t)
    return corotate(point, t, T)


def _rotating_parts(theta, phit, Theta):
    _check_theta(theta)
    sT, cT = np.sin(Theta), np.cos(Theta)
    s, c = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phit), np.cos(phit)
    t2 = np.tan(np.asarray(theta) / 2)
    g = c * sT * cp - s * cT
    return {
        "f": sT * sp / s, "f_phi": sT * cp / s, "f_theta": -sT * sp * c / s ** 2,
        "g": g, "g_phi": -c * sT * sp, "g_theta": -s * sT * cp - c * cT,
        "h": t2 * sT * sp, "h_phi": t2 * sT * cp,
        "h_theta": sT * sp / (2 * np.cos(np.asarray(theta) / 2) ** 2),
        "a": s * sT * cp + c * cT, "a_phi": -s * sT * sp, "a_theta": g,
    }


def rotating_hamilton_rhs(point: PhasePoint, Theta: float, tau: float, T: float = 1.0):
    """Autonomous flow in the frame co-rotating with the measurement axis.

    ``point`` holds co-rotating coordinates.  Returns the derivative in the
    same layout and the optimal readout.
    """
    phit, theta, _, pp, pt, pc = _unpack(point)
    d = _rotating_parts(theta, phit, Theta)
    r = d["a"] - pp * d["f"] + pt * d["g"] - 0.5 * pc * d["h"]
    k = r / tau
    out = np.empty(6)
    out[0] = TWO_PI / T - k * d["f"]
    out[1] = k * d["g"]
    out[2] = -0.5 * k * d["h"]
    out[3] = k * (pp * d["f_phi"] - pt * d["g_phi"] + 0.5 * pc * d["h_phi"] - d["a_phi"])
    out[4] = k * (pp * d["f_theta"] - pt * d["g_theta"] + 0.5 * pc * d["h_theta"]
                  - d["a_theta"])
    out[5] = 0.0
    return out, r


def rotating_action_density(point: PhasePoint, r, tau: float, Theta: float,
                            qdot=None, T: float = 1.0):
    """Action integrand in co-rotating coordinates (phase terms omitted)."""
    phit, theta, _, pp, pt, _ = _unpack(point)
    a = np.sin(theta) * np.sin(Theta) * np.cos(phit) + np.cos(theta) * np.cos(Theta)
    val = readout_log_density_rate(r, a, tau)
    if qdot is not None:
        d = _rotating_parts(theta, phit, Theta)
        phid, thd = qdot[0], qdot[1]
        val = val + (pt * (r * d["g"] - tau * thd)
                     + pp * (tau * (TWO_PI / T - phid) - r * d["f"])) / tau
    return val


def equilibrium_angles(Theta, tau):
    """Polar and azimuthal angle of the co-rotating equilibrium state.

    The polar angle is continued through Theta = pi/2 so it stays in
    [0, pi] and is smooth in Theta.
    """
    k = np.sqrt(1.0 + (TWO_PI * tau) ** 2)
    theta_e = np.arctan2(np.sin(Theta), np.cos(Theta) * k)
    phi_e = -np.arctan(TWO_PI * tau)
    return theta_e, phi_e


def equilibrium_point(Theta: float, tau: float) -> EquilibriumPoint:
    th, ph = equilibrium_angles(Theta, tau)
    return EquilibriumPoint(float(th), float(ph), float(Theta), float(tau))


def equilibrium_momenta(Theta: float, tau: float, T: float = 1.0):
    """Momenta for which the equilibrium state is a co-rotating fixed point.

    Stationarity of the azimuth fixes the readout to ``r = 2 pi tau / f``
    (in co-rotating form).  The polar equation holds by construction of the
    equilibrium angle.  What remains is linear in the three momenta: the
    readout constraint plus the two momentum equations.  On the equator the
    system is rank deficient and the minimum-norm solution is returned.
    """
    theta_e, phi_e = equilibrium_angles(Theta, tau)
    phit = -phi_e
    d = _rotating_parts(theta_e, phit, Theta)
    r = TWO_PI * tau / (T * d["f"])
    A = np.array([
        [-d["f"], d["g"], -0.5 * d["h"]],
        [d["f_phi"], -d["g_phi"], 0.5 * d["h_phi"]],
        [d["f_theta"], -d["g_theta"], 0.5 * d["h_theta"]],
    ])
    b = np.array([r - d["a"], d["a_phi"], d["a_theta"]])
    sol, *_ = np.linalg.lstsq(A, b, rcond=1e-12)
    pp_rot, pt, pc = sol
    return float(-pp_rot), float(pt), float(pc)


def lagrangian_and_measure(theta, phi, phidot, protocol: MeasurementProtocol,
                           t: float) -> LagrangianTerms:
    """Configuration-space form of the action after eliminating r and p."""
    x = phi - protocol.Phi(t)
    Theta, tau = protocol.Theta, protocol.tau
    sx, sT = np.sin(x), np.sin(Theta)
    if abs(sx) < 1e-12 or abs(sT) < 1e-12:
        raise SingularMeasure("measure diverges where sin(phi - Phi) or sin(Theta) vanishes")
    s = np.sin(theta)
    L = (-0.5 * tau * s ** 2 * phidot ** 2 / (sT ** 2 * sx ** 2) - 1.0 / (2 * tau)
         - 0.5 * phidot * np.sin(2 * theta) * (np.cos(Theta) / sT) / sx
         - s ** 2 * (np.cos(x) / sx) * phidot)
    mu = (sT ** 2 * sx ** 2 / (s ** 2 * 2 * tau)) ** -0.5
    theta_dot = 0.5 * phidot * (2 * s ** 2 * (np.cos(Theta) / sT) / sx
                                - np.sin(2 * theta) * np.cos(x) / sx)
    chi_dot = 0.5 * phidot * (np.cos(theta) - 1.0)
    return LagrangianTerms(float(L), float(mu), float(theta_dot), float(chi_dot))


def closed_loop_action_rate(Theta, tau):
    """Per-unit-time action of the co-rotating equilibrium loop."""
    s2 = np.sin(Theta) ** 2
    w = 2 * np.pi ** 2 * tau
    return -w * s2 / (w * tau * np.cos(2 * Theta) + w * tau + 1.0)
