"""Gaussian fluctuation corrections to the equator branch probabilities.

On the equator the state is described by the azimuth alone.  Expanding the
action to second order around an extremal path and switching to the clock

    u(t) = (1/tau) int_0^t sin^2(2 pi t'/T - phi(t')) dt'

turns the fluctuation operator into the Sturm-Liouville form
``-d^2/du^2 + V(u)``.  Its determinant relative to the free operator is
computed by the Gelfand-Yaglom initial-value method (integrated in the
Hamiltonian form, which stays regular where the clock rate vanishes) and,
as a cross-check, from a truncated product of Dirichlet eigenvalues.

Branch weights are ``e^S (det ratio)^(-1/2) (det_zeta)^(-1/2)``; an overall
normalization shared by both branches cancels in their ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import brentq

from .action import closed_loop_action_rate
from .bloch import TWO_PI
from .errors import ConjugatePoint, DegenerateClock, NoBracket, NoConvergence, NotConverged
from .optimal import (
    BranchSolution,
    _equator_segment_maps,
    equator_nonwinding_branch,
    solve_equator,
)

EIGEN_TOL = 0.01
CLOCK_FLOOR = 1e-14


@dataclass(frozen=True)
class EquatorPath:
    """Sampled extremal on the equator: azimuth and its conjugate momentum."""

    tau: float
    times: np.ndarray
    phi: np.ndarray
    p: np.ndarray
    action: float
    winding: int
    T: float = 1.0

    @classmethod
    def from_branch(cls, sol: BranchSolution, T: float = 1.0) -> "EquatorPath":
        return cls(sol.tau, sol.times, sol.phi, sol.p_phi, sol.action, sol.winding, T)


def equilibrium_path(tau: float, N: int = 2000, T: float = 1.0) -> EquatorPath:
    """The co-rotating equilibrium loop on the equator in closed form."""
    t = np.linspace(0.0, T, N + 1)
    phi = -np.arctan(TWO_PI * tau) + TWO_PI * t / T
    p = np.full(N + 1, TWO_PI * tau)
    S = float(closed_loop_action_rate(np.pi / 2, tau) * T)
    return EquatorPath(float(tau), t, phi, p, S, 1, T)


def reparameterize_time(path: EquatorPath, tau: float | None = None):
    """Clock ``u(t)`` of the fluctuation operator and its final value.

    Raises ``DegenerateClock`` when the clock rate vanishes on two adjacent
    samples, i.e. on an interval rather than at isolated instants.
    """
    tau = path.tau if tau is None else tau
    y = TWO_PI * path.times / path.T - path.phi
    rate = np.sin(y) ** 2 / tau
    flat = rate < CLOCK_FLOOR
    if np.any(flat[1:] & flat[:-1]):
        raise DegenerateClock("clock rate vanishes on an interval")
    u = cumulative_trapezoid(rate, path.times, initial=0.0)
    return u, float(u[-1])


def zeta_determinant(u_T: float) -> float:
    """Zeta-regularized determinant of ``d^2/du^2`` with Dirichlet ends."""
    return abs(float(u_T))


def _hessian_blocks(phi, p, t, tau, T):
    """Second derivatives of the equator Hamiltonian along a path.

    Returns ``(H_pphi, H_pp, H_phiphi)``.
    """
    y = TWO_PI * t / T - phi
    s, c = np.sin(y), np.cos(y)
    r = c + p * s
    r_phi = s - p * c
    H_pphi = (r_phi * s - r * c) / tau
    H_pp = s * s / tau
    H_phiphi = (r_phi ** 2 - r ** 2) / tau
    return H_pphi, H_pp, H_phiphi


@dataclass
class SecondVariation:
    """Fluctuation operator ``-d^2/du^2 + V(u)`` around an equator path."""

    path: EquatorPath
    u_grid: np.ndarray
    u_T: float
    V: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @property
    def tau(self) -> float:
        return self.path.tau


def second_variation(path: EquatorPath) -> SecondVariation:
    """Build the fluctuation operator around ``path``.

    With ``A = H_{p phi}``, ``B = H_pp`` and ``C = -H_{phi phi}`` the Jacobi
    system is ``q' = a q + pi``, ``pi' = c q - a pi`` in the clock ``u``
    (``a = A/B``, ``c = C/B``), so ``V = a^2 + c + da/du``.  ``V`` is
    singular wherever the clock rate vanishes; those samples are ``inf``.
    """
    u, u_T = reparameterize_time(path)
    A, B, Hpp = _hessian_blocks(path.phi, path.p, path.times, path.tau, path.T)
    C = -Hpp
    with np.errstate(divide="ignore", invalid="ignore"):
        a = A / B
        c = C / B
        da = np.gradient(a, u) if np.all(np.diff(u) > 0) else np.full_like(a, np.nan)
        V = a * a + c + da
    V = np.where(np.isfinite(V), V, np.inf)
    return SecondVariation(path, u, u_T, V, A, B, C)


@dataclass(frozen=True)
class ZeroMode:
    """Zero mode ``f`` stored as sign and log magnitude, since it can grow like e^(1/tau)."""

    sign: np.ndarray
    log_abs: np.ndarray

    @property
    def values(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.sign * np.exp(self.log_abs)


def jacobi_field(sv: SecondVariation) -> ZeroMode:
    """Zero mode with ``f(0) = 0``, ``f'(0) = 1``, sampled on the path grid.

    It is the derivative of the discrete Hamilton flow with respect to the
    initial momentum, one RK4 step per sample.  Each step starts from the
    stored path, so errors of the path do not accumulate.
    """
    path = sv.path
    h = path.times[1] - path.times[0]
    _, _, D = _equator_segment_maps(path.times[:-1], path.phi[:-1], path.p[:-1],
                                    path.tau, path.T, h, 1)
    n = path.times.size
    sign = np.zeros(n)
    log_abs = np.full(n, -np.inf)
    v = np.array([0.0, 1.0])
    scale = 0.0
    for k in range(D.shape[0]):
        v = D[k] @ v
        m = np.max(np.abs(v))
        v /= m
        scale += np.log(m)
        sign[k + 1] = np.sign(v[0])
        log_abs[k + 1] = scale + np.log(abs(v[0])) if v[0] != 0 else -np.inf
    return ZeroMode(sign, log_abs)


def log_gelfand_yaglom(sv: SecondVariation) -> float:
    """Log of the Gelfand-Yaglom ratio ``f(u_T) / u_T``.

    A sign change of ``f`` inside the interval is a conjugate point and
    raises ``ConjugatePoint``.
    """
    f = jacobi_field(sv)
    log_ratio = float(f.log_abs[-1] - np.log(sv.u_T))
    if np.any(f.sign[1:] < 0):
        raise ConjugatePoint(f"zero mode changes sign (log ratio {log_ratio:.6g})")
    return log_ratio


def gelfand_yaglom(sv: SecondVariation) -> float:
    """Determinant of ``-d^2/du^2 + V`` relative to ``-d^2/du^2``."""
    return float(np.exp(log_gelfand_yaglom(sv)))


def gelfand_yaglom_potential(sv: SecondVariation, n_grid: int = 20000) -> float:
    """Gelfand-Yaglom ratio from ``f'' = V f`` integrated directly in ``u``.

    Only usable when ``V`` is finite; an independent route for regular
    branches.
    """
    if not np.all(np.isfinite(sv.V)):
        raise NotConverged("potential is singular on this path")
    u = np.linspace(0.0, sv.u_T, n_grid + 1)
    V = np.interp(u, sv.u_grid, sv.V)
    Vh = np.interp(u[:-1] + 0.5 * (u[1] - u[0]), sv.u_grid, sv.V)
    h = u[1] - u[0]
    f, g = 0.0, 1.0
    for k in range(n_grid):
        v0, vh, v1 = V[k], Vh[k], V[k + 1]
        k1f, k1g = g, v0 * f
        k2f, k2g = g + h / 2 * k1g, vh * (f + h / 2 * k1f)
        k3f, k3g = g + h / 2 * k2g, vh * (f + h / 2 * k2f)
        k4f, k4g = g + h * k3g, v1 * (f + h * k3f)
        f += h / 6 * (k1f + 2 * k2f + 2 * k3f + k4f)
        g += h / 6 * (k1g + 2 * k2g + 2 * k3g + k4g)
    return f / sv.u_T


def _dirichlet_eigs(diag, off, N):
    return eigh_tridiagonal(diag, off, select="i", select_range=(0, N - 1), eigvals_only=True)


@dataclass(frozen=True)
class EigenReport:
    ratio: float
    ratio_half: float
    eigenvalues: np.ndarray
    free_eigenvalues: np.ndarray


def eigen_det_ratio(sv: SecondVariation, N: int = 64, n_grid: int = 2048,
                    tol: float = EIGEN_TOL) -> EigenReport:
    """Determinant ratio from the ``N`` smallest Dirichlet eigenvalues.

    Both operators are discretized by second-order central differences on
    a uniform ``u`` grid.  The product over the remaining modes is replaced
    by its first-order tail ``prod_{i>N} (1 + <V> u_T^2 / (pi i)^2)``.  The
    estimate is compared with the one from ``N // 2`` modes.
    """
    if N < 8:
        raise ValueError("need at least 8 eigenvalues")
    if not np.all(np.isfinite(sv.V)):
        raise NotConverged("potential is singular on this path; eigenvalue route undefined")
    u = np.linspace(0.0, sv.u_T, n_grid + 1)[1:-1]
    h = sv.u_T / n_grid
    V = np.interp(u, sv.u_grid, sv.V)
    off = np.full(u.size - 1, -1.0 / h ** 2)
    lam = _dirichlet_eigs(2.0 / h ** 2 + V, off, N)
    lam0 = _dirichlet_eigs(np.full(u.size, 2.0 / h ** 2), off, N)
    vbar = float(np.mean(V))

    def estimate(n):
        logs = np.log(np.abs(lam[:n])) - np.log(lam0[:n])
        sign = np.prod(np.sign(lam[:n]))
        i = np.arange(n + 1, n + 200001)
        with np.errstate(invalid="ignore"):
            tail = np.sum(np.log1p(vbar * sv.u_T ** 2 / (np.pi * i) ** 2))
        return float(sign * np.exp(np.sum(logs) + tail))

    full, half = estimate(N), estimate(N // 2)
    report = EigenReport(full, half, lam, lam0)
    if not (np.isfinite(full) and np.isfinite(half)) or full <= 0 or abs(full - half) > tol * abs(full):
        raise NotConverged(f"eigenvalue products disagree: N={N}: {full:.6g}, N/2: {half:.6g}",
                           estimate=report)
    return report


# ---------------------------------------------------------------------------
# branch comparison


@dataclass
class BranchCorrection:
    winding: int
    S_saddle: float
    u_T: float
    det_ratio: float
    log_det_ratio: float
    det_zeta: float

    @property
    def log_corrected(self) -> float:
        """Log of the corrected weight, up to the shared normalization."""
        return self.S_saddle - 0.5 * self.log_det_ratio - 0.5 * np.log(self.det_zeta)


def branch_correction(path: EquatorPath) -> BranchCorrection:
    sv = second_variation(path)
    log_d = log_gelfand_yaglom(sv)
    return BranchCorrection(path.winding, path.action, sv.u_T, float(np.exp(min(log_d, 700.0))),
                            log_d, zeta_determinant(sv.u_T))


@dataclass
class CorrectionReport:
    tau: float
    winding: BranchCorrection
    nonwinding: BranchCorrection
    R_saddle: float
    R: float
    extra: dict = field(default_factory=dict)


class NonwindingCache:
    """Non-winding equator solutions reused across strength queries.

    New strengths are solved by continuation from the nearest stored
    solution on the weak-measurement side.
    """

    def __init__(self, N: int = 2000, T: float = 1.0):
        self.N, self.T = N, T
        self.solutions: dict[float, BranchSolution] = {}

    def populate(self, taus):
        taus = sorted(set(float(t) for t in taus) - set(self.solutions), reverse=True)
        if taus:
            for sol in equator_nonwinding_branch(taus, self.N, self.T):
                self.solutions[sol.tau] = sol

    def get(self, tau: float) -> BranchSolution:
        tau = float(tau)
        if tau in self.solutions:
            return self.solutions[tau]
        known = sorted(self.solutions)
        above = [t for t in known if t > tau]
        if above:
            nb = self.solutions[above[0]]
            try:
                sol = solve_equator(tau, 0, nb.initial_momenta[0], self.N, self.T)
            except NoConvergence:
                sol = solve_equator(tau, 0, nb.initial_momenta[0], self.N, self.T, path_guess=nb)
        else:
            sol = equator_nonwinding_branch([tau], self.N, self.T)[0]
        self.solutions[tau] = sol
        return sol


def corrected_transition_ratio(tau: float, cache: NonwindingCache | None = None,
                               N: int = 2000, T: float = 1.0) -> CorrectionReport:
    """Corrected ratio of winding to non-winding self-closing probability."""
    cache = cache or NonwindingCache(N, T)
    wind = branch_correction(equilibrium_path(tau, N, T))
    non = branch_correction(EquatorPath.from_branch(cache.get(tau), T))
    R_saddle = float(np.exp(wind.S_saddle - non.S_saddle))
    R = float(np.exp(wind.log_corrected - non.log_corrected))
    return CorrectionReport(float(tau), wind, non, R_saddle, R)


def saddle_ratio(tau: float, cache: NonwindingCache | None = None, N: int = 2000,
                 T: float = 1.0) -> float:
    cache = cache or NonwindingCache(N, T)
    S1 = float(closed_loop_action_rate(np.pi / 2, tau) * T)
    return float(np.exp(S1 - cache.get(tau).action))


def ratio_scan(taus, N: int = 2000, T: float = 1.0, cache: NonwindingCache | None = None):
    cache = cache or NonwindingCache(N, T)
    cache.populate(taus)
    return [corrected_transition_ratio(t, cache, N, T) for t in taus]


def find_tau_c_eff(window=(0.02, 0.3), n_scan: int = 30, N: int = 2000, T: float = 1.0,
                   cache: NonwindingCache | None = None) -> float:
    """Strength where the corrected ratio crosses one.

    ``R`` is scanned on a grid first; a single sign change of ``log R`` is
    then refined by Brent's method.  No crossing raises ``NoBracket``.
    """
    cache = cache or NonwindingCache(N, T)
    taus = np.linspace(window[1], window[0], n_scan)
    reports = ratio_scan(taus, N, T, cache)
    logR = np.array([np.log(r.R) for r in reports])
    sgn = np.sign(logR)
    flips = np.flatnonzero(sgn[1:] != sgn[:-1])
    if flips.size == 0:
        raise NoBracket(f"corrected ratio does not cross 1 on [{window[0]}, {window[1]}]: "
                        f"log R ranges over [{logR.min():.3g}, {logR.max():.3g}]")
    i = flips[0]
    g = lambda t: np.log(corrected_transition_ratio(t, cache, N, T).R)
    return float(brentq(g, taus[i + 1], taus[i], xtol=1e-8))
