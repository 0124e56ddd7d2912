"""Pure-qubit states and the rotating-axis Gaussian measurement model.

States are written as ``e^{i chi} (cos(theta/2), e^{i phi} sin(theta/2))``.
The measurement axis sweeps a circle of constant latitude ``Theta`` with
azimuth ``Phi(t) = 2 pi t / T``.  A Gaussian readout ``r`` acts through the
positive Kraus operator

    E(r) = c_+ |n><n| + c_- |-n><-n|,
    c_pm = (dt / 2 pi tau)^{1/4} exp(-dt (r -+ 1)^2 / 4 tau),

so the spinor stays parallel transported across every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateState, InvalidStrength

TWO_PI = 2.0 * np.pi


def wrap_angle(x):
    """Map angles to the half-open interval (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, TWO_PI) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    return y if np.ndim(y) else float(y)


@dataclass(frozen=True)
class BlochState:
    theta: float
    phi: float
    chi: float = 0.0

    def spinor(self) -> np.ndarray:
        return spinor(self.theta, self.phi, self.chi)

    @property
    def bloch_vector(self) -> np.ndarray:
        return bloch_vector(self.theta, self.phi)


@dataclass(frozen=True)
class MeasurementAxis:
    Theta: float
    Phi: float

    @property
    def vector(self) -> np.ndarray:
        return bloch_vector(self.Theta, self.Phi)


@dataclass(frozen=True)
class GaussianVariant:
    name: str = "gaussian"


@dataclass(frozen=True)
class NullVariant:
    c: float
    name: str = "null"


@dataclass(frozen=True)
class MeasurementProtocol:
    """Latitude, inverse strength and time grid of one measurement loop."""

    Theta: float
    tau: float
    T: float = 1.0
    N: int = 100
    variant: GaussianVariant | NullVariant = GaussianVariant()

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def Phi(self, t):
        return TWO_PI * np.asarray(t) / self.T

    def axis(self, t) -> MeasurementAxis:
        return MeasurementAxis(self.Theta, float(self.Phi(t)))


@dataclass(frozen=True)
class StepOutcome:
    readout: float
    weight: float
    next_state: BlochState


def spinor(theta, phi, chi=0.0) -> np.ndarray:
    """Spinor components stacked on the last axis."""
    theta, phi, chi = np.broadcast_arrays(
        np.asarray(theta, float), np.asarray(phi, float), np.asarray(chi, float))
    out = np.empty(theta.shape + (2,), dtype=complex)
    g = np.exp(1j * chi)
    out[..., 0] = g * np.cos(theta / 2)
    out[..., 1] = g * np.exp(1j * phi) * np.sin(theta / 2)
    return out


def bloch_vector(theta, phi) -> np.ndarray:
    theta = np.asarray(theta, float)
    phi = np.asarray(phi, float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def bloch_from_spinor(psi) -> np.ndarray:
    psi = np.asarray(psi)
    c0, c1 = psi[..., 0], psi[..., 1]
    cross = np.conj(c0) * c1
    return np.stack([2 * cross.real, 2 * cross.imag,
                     np.abs(c0) ** 2 - np.abs(c1) ** 2], axis=-1)


def angles_from_spinor(psi, phi_prev=0.0, chi_prev=0.0):
    """Read (theta, phi, chi) off a normalized spinor.

    ``phi`` and ``chi`` are unwrapped against the previous values: each
    increment is taken in (-pi, pi].  ``chi`` is read from the larger
    component so it stays well defined near either pole.  At an exact pole
    the azimuth is undefined and the previous value is kept.
    """
    psi = np.asarray(psi)
    c0, c1 = psi[..., 0], psi[..., 1]
    m0, m1 = np.abs(c0), np.abs(c1)
    if np.any((m0 < 1e-14) & (m1 < 1e-14)):
        raise DegenerateState("both spinor components vanish")
    theta = 2.0 * np.arctan2(m1, m0)
    tiny = 1e-300
    has_phase = (m0 > tiny) & (m1 > tiny)
    phi_raw = np.angle(c1) - np.angle(c0)
    phi = np.where(has_phase, phi_prev + wrap_angle(phi_raw - phi_prev), phi_prev)
    chi_raw = np.where(theta <= np.pi / 2, np.angle(c0), np.angle(c1) - phi)
    chi = chi_prev + wrap_angle(chi_raw - chi_prev)
    if np.ndim(theta) == 0:
        return float(theta), float(phi), float(chi)
    return theta, phi, chi


def mean_readout(Theta, Phi, theta, phi):
    """Conditional mean of the readout, the projection of the state on the axis."""
    return (np.cos(theta) * np.cos(Theta)
            + np.sin(theta) * np.sin(Theta) * np.cos(phi - Phi))


def rotation_to_axis(theta: float, phi: float) -> np.ndarray:
    """Unitary taking the Bloch state (theta, phi) to |0>."""
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    e = np.exp(1j * phi)
    return np.array([[c, np.conj(e) * s], [-e * s, c]], dtype=complex)


def _axis_kets(Theta, Phi):
    c, s = np.cos(np.asarray(Theta) / 2), np.sin(np.asarray(Theta) / 2)
    e = np.exp(1j * np.asarray(Phi, float))
    up = np.stack(np.broadcast_arrays(c + 0j, e * s), axis=-1)
    down = np.stack(np.broadcast_arrays(-np.conj(e) * s, c + 0j), axis=-1)
    return up, down


def kraus_log_coefficients(r, dt, tau):
    """Logarithms of the two eigenvalues of the Gaussian Kraus operator."""
    r = np.asarray(r, float)
    base = 0.25 * np.log(dt / (TWO_PI * tau))
    return (base - dt * (r - 1.0) ** 2 / (4 * tau),
            base - dt * (r + 1.0) ** 2 / (4 * tau))


def kraus_operator(r: float, axis: MeasurementAxis, dt: float, tau: float) -> np.ndarray:
    lp, lm = kraus_log_coefficients(r, dt, tau)
    R = rotation_to_axis(axis.Theta, axis.Phi)
    M = np.diag([np.exp(lp), np.exp(lm)])
    return R.conj().T @ M @ R


def readout_density(r, a, dt, tau):
    """Exact readout density Tr[E^dag E rho], a two-Gaussian mixture."""
    r = np.asarray(r, float)
    var = tau / dt
    norm = 1.0 / np.sqrt(TWO_PI * var)
    gp = np.exp(-(r - 1.0) ** 2 / (2 * var))
    gm = np.exp(-(r + 1.0) ** 2 / (2 * var))
    return norm * (0.5 * (1 + a) * gp + 0.5 * (1 - a) * gm)


def log_readout_density(r, a, dt, tau):
    r = np.asarray(r, float)
    var = tau / dt
    lp = np.log(np.maximum(0.5 * (1 + a), 1e-300)) - (r - 1.0) ** 2 / (2 * var)
    lm = np.log(np.maximum(0.5 * (1 - a), 1e-300)) - (r + 1.0) ** 2 / (2 * var)
    return np.logaddexp(lp, lm) - 0.5 * np.log(TWO_PI * var)


def readout_from_draws(a, u, z, dt, tau):
    """Map a uniform ``u`` and a standard normal ``z`` to a mixture readout.

    Drawing both variates independently of the state keeps the random
    stream fixed per trajectory, which is what lets ensembles be batched
    without changing results.
    """
    sign = np.where(u < 0.5 * (1 + np.asarray(a)), 1.0, -1.0)
    return sign + np.sqrt(tau / dt) * z


def sample_readout(state: BlochState, axis: MeasurementAxis, dt: float, tau: float,
                   rng: np.random.Generator) -> float:
    a = mean_readout(axis.Theta, axis.Phi, state.theta, state.phi)
    u = rng.random()
    z = rng.standard_normal()
    return float(readout_from_draws(a, u, z, dt, tau))


def kraus_step_spinors(psi, r, Theta, Phi, dt, tau):
    """Apply the Gaussian Kraus operator to a batch of spinors.

    Returns the renormalized spinors and the log of the step weight
    <psi|E^dag E|psi>.
    """
    psi = np.asarray(psi, complex)
    up, down = _axis_kets(Theta, Phi)
    lp, lm = kraus_log_coefficients(r, dt, tau)
    ap = np.sum(np.conj(up) * psi, axis=-1)
    am = np.sum(np.conj(down) * psi, axis=-1)
    shift = np.maximum(lp, lm)
    cp, cm = np.exp(lp - shift), np.exp(lm - shift)
    new = (cp * ap)[..., None] * up + (cm * am)[..., None] * down
    nrm2 = np.abs(cp * ap) ** 2 + np.abs(cm * am) ** 2
    log_w = np.log(nrm2) + 2 * shift
    return new / np.sqrt(nrm2)[..., None], log_w


def apply_kraus(state: BlochState, r: float, axis: MeasurementAxis, dt: float,
                tau: float) -> StepOutcome:
    psi = state.spinor()
    if np.all(np.abs(psi) < 1e-14):
        raise DegenerateState("input spinor is zero")
    new, log_w = kraus_step_spinors(psi, r, axis.Theta, axis.Phi, dt, tau)
    th, ph, ch = angles_from_spinor(new, state.phi, state.chi)
    return StepOutcome(float(r), float(np.exp(log_w)), BlochState(th, ph, ch))


def spinor_rhs(psi, r, Theta, Phi, tau):
    """Continuum back-action d psi/dt = (r / 2 tau)(sigma.n - a) psi."""
    n = bloch_vector(Theta, Phi)
    c0, c1 = psi[..., 0], psi[..., 1]
    nx, ny, nz = n[..., 0], n[..., 1], n[..., 2]
    s0 = nz * c0 + (nx - 1j * ny) * c1
    s1 = (nx + 1j * ny) * c0 - nz * c1
    a = (np.conj(c0) * s0 + np.conj(c1) * s1).real
    k = np.asarray(r) / (2 * tau)
    return np.stack([k * (s0 - a * c0), k * (s1 - a * c1)], axis=-1)


def euler_step(state: BlochState, r: float, axis: MeasurementAxis, dt: float,
               tau: float) -> BlochState:
    """One explicit Euler step of the angle equations, for cross-checks only."""
    x = state.phi - axis.Phi
    sT = np.sin(axis.Theta)
    st = np.sin(state.theta)
    f = sT * np.sin(x) / st
    g = np.cos(state.theta) * sT * np.cos(x) - st * np.cos(axis.Theta)
    h = np.tan(state.theta / 2) * sT * np.sin(x)
    k = r / tau
    return BlochState(state.theta + dt * k * g, state.phi - dt * k * f,
                      state.chi + dt * 0.5 * k * h)


def null_kraus(j: int, c: float, dt: float, T: float = 1.0) -> np.ndarray:
    """Binary-outcome Kraus operator in the measurement frame."""
    eps = 4.0 * c * dt / T
    if eps > 1.0 or eps < 0.0:
        raise InvalidStrength(f"4 c dt / T = {eps} outside [0, 1]")
    if j == 1:
        return np.diag([1.0, np.sqrt(1.0 - eps)]).astype(complex)
    if j == 0:
        return np.diag([0.0, np.sqrt(eps)]).astype(complex)
    raise ValueError("null-type outcome must be 0 or 1")


def null_kraus_rotated(j: int, c: float, axis: MeasurementAxis, dt: float,
                       T: float = 1.0) -> np.ndarray:
    R = rotation_to_axis(axis.Theta, axis.Phi)
    return R.conj().T @ null_kraus(j, c, dt, T) @ R
