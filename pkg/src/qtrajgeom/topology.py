"""Open geometric phases, Chern and winding numbers of trajectory families.

A family is the set of record-driven trajectories obtained by sweeping the
measurement latitude ``Theta`` over ``[eps, pi - eps]`` for one strength
``tau``.  Each open trajectory is closed by the shortest geodesic back to
its initial ray, so every family member is a loop and the family sweeps a
closed surface whose degree is the Chern number.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .action import equilibrium_angles
from .bloch import TWO_PI, bloch_from_spinor, bloch_vector
from .errors import AntipodalEndpoints, GridTooCoarse, NoFlip, NonQuantized
from .trajectories import TrajectoryRecord, propagate_family

POLE_EPS = 1e-3
ANTIPODAL_TOL = 1e-10
CHERN_MISMATCH_TOL = 0.05
COVERAGE_THRESHOLD = 0.2


def open_phase(theta0, phi0, chi0, thetaT, phiT, chiT):
    """Geometric phase of an open parallel-transported path, closed by a geodesic.

    Works elementwise on arrays.  The result is the accumulated phase
    ``chiT - chi0`` plus the phase of the closing overlap, which lies in
    ``(-pi, pi]``, so it stays continuous with the tracked phase.
    """
    ov = (np.cos(theta0 / 2) * np.cos(thetaT / 2)
          + np.sin(theta0 / 2) * np.sin(thetaT / 2) * np.exp(1j * (phiT - phi0)))
    if np.any(np.abs(ov) < ANTIPODAL_TOL):
        raise AntipodalEndpoints("end point is antipodal to the start; no unique geodesic")
    out = np.asarray(chiT, float) - np.asarray(chi0, float) + np.angle(ov)
    return out if np.ndim(out) else float(out)


def geometric_phase_open(traj: TrajectoryRecord) -> float:
    """Geometric phase of one trajectory closed by the shortest geodesic."""
    return open_phase(traj.theta[0], traj.phi[0], traj.chi[0],
                      traj.theta[-1], traj.phi[-1], traj.chi[-1])


# ---------------------------------------------------------------------------
# families


def initial_angles(rule: str, Thetas, tau: float):
    """Initial polar and azimuthal angles for each latitude.

    ``on_axis`` starts on the measurement axis; ``equilibrium`` starts at the
    co-rotating fixed point of the optimal dynamics.
    """
    Thetas = np.asarray(Thetas, float)
    if rule == "on_axis":
        return Thetas.copy(), np.zeros_like(Thetas)
    if rule == "equilibrium":
        th, ph = equilibrium_angles(Thetas, tau)
        return np.asarray(th, float), np.full_like(Thetas, ph)
    raise ValueError(f"unknown init rule {rule!r}")


def readout_record(rule):
    """Map a record rule to what ``propagate_family`` accepts.

    ``"greedy"`` uses the running mean; ``"fixed"`` or a number uses a
    constant readout (``"fixed"`` means r = 1).
    """
    if rule == "greedy":
        return "greedy"
    if rule == "fixed":
        rule = 1.0
    if isinstance(rule, (int, float)):
        value = float(rule)
        return lambda t: value
    raise ValueError(f"unknown record rule {rule!r}")


def theta_grid(n: int = 128, eps: float = POLE_EPS) -> np.ndarray:
    return np.linspace(eps, np.pi - eps, n)


@dataclass
class PhaseFamily:
    """Record-driven trajectories over a latitude grid at fixed strength."""

    tau: float
    Theta_grid: np.ndarray
    times: np.ndarray
    spinors: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    chi_g: np.ndarray
    init_rule: str = "on_axis"
    record_rule: object = "greedy"
    chern: float | None = None
    winding: int | None = None
    extra: dict = field(default_factory=dict)

    def closed_loops(self, n_geo: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Spinor loops with the closing geodesic appended.

        Returns ``(s, psi)`` where ``s`` runs over ``[0, T + T/4]`` and
        ``psi`` has shape ``(n_Theta, len(s), 2)``.  The geodesic is
        horizontal, so the closed lift differs from the start by the
        geometric phase.
        """
        N = self.times.size - 1
        n_geo = n_geo or max(N // 4, 8)
        T = self.times[-1]
        psi0, psiT = self.spinors[:, 0], self.spinors[:, -1]
        ov = np.sum(np.conj(psiT) * psi0, axis=-1)
        if np.any(np.abs(ov) < ANTIPODAL_TOL):
            raise AntipodalEndpoints("a family member ends antipodal to its start")
        # rotate the target so its overlap with psiT is real and positive
        target = psi0 * (np.abs(ov) / ov)[:, None]
        alpha = np.arccos(np.clip(np.abs(ov), -1.0, 1.0))
        s = np.linspace(0.0, 1.0, n_geo + 1)[1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            sa = np.sin(alpha)[:, None]
            wa = np.where(sa > 1e-12, np.sin((1 - s)[None, :] * alpha[:, None]) / sa, 1 - s[None, :])
            wb = np.where(sa > 1e-12, np.sin(s[None, :] * alpha[:, None]) / sa, s[None, :])
        geo = wa[..., None] * psiT[:, None, :] + wb[..., None] * target[:, None, :]
        geo /= np.linalg.norm(geo, axis=-1, keepdims=True)
        loops = np.concatenate([self.spinors, geo], axis=1)
        svals = np.concatenate([self.times, T + s * T / 4])
        return svals, loops


def build_family(tau: float, init_rule: str = "on_axis", record_rule="greedy",
                 n_theta: int = 128, N: int = 256, T: float = 1.0,
                 eps: float = POLE_EPS, Thetas=None) -> PhaseFamily:
    """Propagate one family and evaluate the open geometric phase of each member."""
    Thetas = theta_grid(n_theta, eps) if Thetas is None else np.asarray(Thetas, float)
    if np.any(np.diff(Thetas) <= 0):
        raise ValueError("latitude grid must be strictly increasing")
    th0, ph0 = initial_angles(init_rule, Thetas, tau)
    fam = propagate_family(Thetas, tau, N, th0, ph0, readout_record(record_rule), T)
    chi_g = open_phase(fam["theta"][:, 0], fam["phi"][:, 0], fam["chi"][:, 0],
                       fam["theta"][:, -1], fam["phi"][:, -1], fam["chi"][:, -1])
    return PhaseFamily(float(tau), Thetas, fam["times"], fam["spinors"], fam["theta"],
                       fam["phi"], fam["chi"], np.unwrap(np.atleast_1d(chi_g)),
                       init_rule, record_rule)


# ---------------------------------------------------------------------------
# topological numbers


def _extrapolate_to(x, y, x_end):
    """Linear extrapolation from the two samples nearest ``x_end``."""
    if abs(x_end - x[0]) < abs(x_end - x[-1]):
        x0, x1, y0, y1 = x[0], x[1], y[0], y[1]
    else:
        x0, x1, y0, y1 = x[-1], x[-2], y[-1], y[-2]
    return y0 + (y1 - y0) * (x_end - x0) / (x1 - x0)


def berry_curvature(family: PhaseFamily, n_geo: int | None = None):
    """Curvature ``B = Im(d_t <psi|d_Theta psi> - d_Theta <psi|d_t psi>)`` on the grid.

    For normalized states this equals ``2 Im <d_t psi|d_Theta psi>``, which
    is gauge invariant.  Derivatives are centered differences over the
    (Theta, s) grid, where ``s`` includes the closing geodesic.
    """
    s, psi = family.closed_loops(n_geo)
    d_th = np.gradient(psi, family.Theta_grid, axis=0)
    d_t = np.gradient(psi, s, axis=1)
    B = 2.0 * np.imag(np.sum(np.conj(d_t) * d_th, axis=-1))
    return s, B


@dataclass(frozen=True)
class ChernReport:
    C: float
    C_curvature: float
    C_boundary: float
    mismatch: float


def chern_number(family: PhaseFamily, n_geo: int | None = None,
                 tol: float = CHERN_MISMATCH_TOL) -> ChernReport:
    """Chern number from the curvature integral and from the phase at the poles.

    The reported ``C`` is the curvature value.  Strips between the grid
    ends and the poles are added by linear extrapolation in both routes.
    """
    Th = family.Theta_grid
    s, B = berry_curvature(family, n_geo)
    b = np.trapezoid(B, s, axis=1)
    flux = np.trapezoid(b, Th)
    flux += 0.5 * (b[0] + _extrapolate_to(Th, b, 0.0)) * Th[0]
    flux += 0.5 * (b[-1] + _extrapolate_to(Th, b, np.pi)) * (np.pi - Th[-1])
    C_curv = flux / TWO_PI
    chi = family.chi_g
    C_bd = (_extrapolate_to(Th, chi, np.pi) - _extrapolate_to(Th, chi, 0.0)) / TWO_PI
    report = ChernReport(float(C_curv), float(C_curv), float(C_bd), float(abs(C_curv - C_bd)))
    if report.mismatch > tol:
        raise GridTooCoarse(f"curvature and boundary Chern numbers differ by {report.mismatch:.3g}",
                            report=report)
    family.chern = report.C
    return report


def winding_number(Thetas, chi, tol: float = 0.1) -> int:
    """Winding ``w = round(|chi(pi/2) - chi(0)| / pi)`` of a phase curve.

    ``chi(0)`` is the value at the first grid point; if ``pi/2`` is not a
    grid point the curve is interpolated linearly there.
    """
    Thetas = np.asarray(Thetas, float)
    chi = np.asarray(chi, float)
    if not Thetas[0] <= np.pi / 2 <= Thetas[-1]:
        raise ValueError("latitude grid must contain pi/2")
    x = abs(np.interp(np.pi / 2, Thetas, chi) - chi[0]) / np.pi
    w = int(round(x))
    if abs(x - w) > tol or w > 1:
        raise NonQuantized(f"|chi(pi/2) - chi(0)| / pi = {x:.4f} is not 0 or 1")
    return w


def family_winding(family: PhaseFamily) -> int:
    family.winding = winding_number(family.Theta_grid, family.chi_g)
    return family.winding


def coverage_gap(family: PhaseFamily, n_probe: int = 2000, n_geo: int | None = None) -> float:
    """Largest angular distance from any point of the sphere to the family image.

    Probes are a Fibonacci lattice; the image includes the closing
    geodesics.  A value below ``COVERAGE_THRESHOLD`` means the family
    covers the sphere.
    """
    _, psi = family.closed_loops(n_geo)
    pts = bloch_from_spinor(psi).reshape(-1, 3)
    k = np.arange(n_probe) + 0.5
    z = 1 - 2 * k / n_probe
    az = np.pi * (1 + 5 ** 0.5) * k
    probes = bloch_vector(np.arccos(z), az)
    best = np.full(n_probe, -1.0)
    for start in range(0, pts.shape[0], 4096):
        best = np.maximum(best, np.max(probes @ pts[start:start + 4096].T, axis=1))
    return float(np.max(np.arccos(np.clip(best, -1.0, 1.0))))


def covers_sphere(family: PhaseFamily, threshold: float = COVERAGE_THRESHOLD) -> bool:
    return coverage_gap(family) < threshold


# ---------------------------------------------------------------------------
# open-phase transition


@dataclass(frozen=True)
class OpenTransition:
    tau_c: float
    taus: np.ndarray
    windings: np.ndarray


def open_transition_scan(init_rule: str = "on_axis", record_rule="greedy", tau_grid=None,
                         n_theta: int = 128, N: int = 256, T: float = 1.0,
                         xtol: float = 1e-5) -> OpenTransition:
    """Strength at which the winding of the open-phase family flips.

    The scan evaluates the winding on ``tau_grid``; the single flip is then
    refined by bisection on the winding.  A second flip means the
    monotonicity assumption failed and raises ``NoFlip`` as well.
    """
    taus = np.linspace(0.02, 0.5, 25) if tau_grid is None else np.asarray(tau_grid, float)

    def w_of(tau):
        fam = build_family(tau, init_rule, record_rule, n_theta, N, T)
        return family_winding(fam)

    ws = np.array([w_of(t) for t in taus])
    flips = np.flatnonzero(np.diff(ws))
    if flips.size == 0:
        raise NoFlip(f"winding is {ws[0]} over the whole window")
    if flips.size > 1:
        raise NoFlip("winding flips more than once; the scan window is not monotone")
    lo, hi = taus[flips[0]], taus[flips[0] + 1]
    w_lo = ws[flips[0]]
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if w_of(mid) == w_lo:
            lo = mid
        else:
            hi = mid
    return OpenTransition(0.5 * (lo + hi), taus, ws)


def equator_final_offset(tau: float, init_rule: str = "on_axis", record_rule="greedy",
                         N: int = 256, T: float = 1.0) -> float:
    """Azimuth travelled by the equatorial member, minus one full turn.

    Its winding flips where this crosses ``-pi``, which gives a continuous
    function to bracket the open transition.
    """
    th0, ph0 = initial_angles(init_rule, np.array([np.pi / 2]), tau)
    fam = propagate_family(np.pi / 2, tau, N, th0, ph0, readout_record(record_rule), T)
    return float(fam["phi"][0, -1] - fam["phi"][0, 0] - TWO_PI)


def open_transition_equator(init_rule: str = "on_axis", record_rule="greedy",
                            window=(0.02, 0.5), N: int = 256, T: float = 1.0) -> float:
    """Root of ``equator_final_offset + pi``, an independent route to the open transition."""
    g = lambda t: equator_final_offset(t, init_rule, record_rule, N, T) + np.pi
    return float(brentq(g, *window, xtol=1e-10))
