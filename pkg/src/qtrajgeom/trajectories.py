"""Monitored-trajectory simulation.

Two propagation modes are provided.  Sampled propagation draws readouts
from the exact mixture distribution and applies the Kraus map step by step.
Record-driven propagation integrates the continuum back-action equation
with a prescribed readout ``r(t)`` (or the greedy choice ``r = a``) using
fixed-step RK4 on the spinor, which is free of the polar-coordinate
singularities.  An angle-coordinate integrator is kept for cross-checks.

Every trajectory owns a random substream spawned from the ensemble seed.
Each stream supplies ``N`` uniforms and ``N`` normals up front, so
results do not depend on batching or on the number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .bloch import (
    TWO_PI,
    BlochState,
    MeasurementProtocol,
    NullVariant,
    angles_from_spinor,
    bloch_from_spinor,
    kraus_step_spinors,
    log_readout_density,
    mean_readout,
    readout_from_draws,
    rotation_to_axis,
    null_kraus,
    spinor,
    spinor_rhs,
)
from .errors import EmptyBin, SingularCoordinate

ENSEMBLE_CHUNK = 256


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    readouts: np.ndarray
    step_log_weights: np.ndarray
    spinors: np.ndarray
    geometric_phase: float | None = None

    @property
    def log_weight(self) -> float:
        return float(np.sum(self.step_log_weights))

    @property
    def phi_unwrapped_final(self) -> float:
        return float(self.phi[-1])

    @property
    def states(self) -> list[BlochState]:
        return [BlochState(float(a), float(b), float(c))
                for a, b, c in zip(self.theta, self.phi, self.chi)]

    @property
    def final_state(self) -> BlochState:
        return BlochState(float(self.theta[-1]), float(self.phi[-1]), float(self.chi[-1]))


@dataclass
class EnsembleSummary:
    n_traj: int
    seed: int
    phi_final: np.ndarray
    chi_final: np.ndarray
    theta_final: np.ndarray
    log_weight: np.ndarray
    phi_initial: float
    records: list[TrajectoryRecord] | None = field(default=None, repr=False)

    def histogram(self, bin_width: float = 0.1):
        dphi = self.phi_final - self.phi_initial
        lo = np.floor(dphi.min() / bin_width) * bin_width
        hi = np.ceil(dphi.max() / bin_width) * bin_width + bin_width
        edges = np.arange(lo, hi + 0.5 * bin_width, bin_width)
        counts, edges = np.histogram(dphi, bins=edges)
        return counts, edges


@dataclass(frozen=True)
class SelfClosingStats:
    n_total: int
    n_winding: int
    n_nonwinding: int

    @property
    def P_winding(self) -> float:
        return self.n_winding / self.n_total

    @property
    def P_nonwinding(self) -> float:
        return self.n_nonwinding / self.n_total

    @property
    def R_empirical(self) -> float:
        return self.n_winding / self.n_nonwinding


def substream(seed: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(index,))
    return np.random.default_rng(ss)


def _draws(seed: int, indices, N: int):
    u = np.empty((len(indices), N))
    z = np.empty((len(indices), N))
    for row, i in enumerate(indices):
        g = substream(seed, int(i))
        u[row] = g.random(N)
        z[row] = g.standard_normal(N)
    return u, z


def _null_step(psi, u, Theta, Phi, c, dt, T):
    R = rotation_to_axis(Theta, Phi)
    E1 = R.conj().T @ null_kraus(1, c, dt, T) @ R
    E0 = R.conj().T @ null_kraus(0, c, dt, T) @ R
    n1 = psi @ E1.T
    n0 = psi @ E0.T
    p1 = np.sum(np.abs(n1) ** 2, axis=-1)
    take1 = u < p1
    new = np.where(take1[:, None], n1, n0)
    w = np.where(take1, p1, 1.0 - p1)
    new = new / np.sqrt(np.sum(np.abs(new) ** 2, axis=-1))[:, None]
    return new, np.where(take1, 1.0, 0.0), np.log(w)


def _kraus_batch(protocol: MeasurementProtocol, init: BlochState, u, z, keep_paths: bool):
    B, N = u.shape
    dt, tau, Theta = protocol.dt, protocol.tau, protocol.Theta
    psi = np.repeat(init.spinor()[None, :], B, axis=0)
    theta = np.full(B, init.theta)
    phi = np.full(B, init.phi)
    chi = np.full(B, init.chi)
    logw = np.zeros(B)
    if keep_paths:
        paths = {k: np.empty((B, N + 1)) for k in ("theta", "phi", "chi")}
        paths["theta"][:, 0], paths["phi"][:, 0], paths["chi"][:, 0] = theta, phi, chi
        r_all = np.empty((B, N))
        lw_all = np.empty((B, N))
        psi_all = np.empty((B, N + 1, 2), dtype=complex)
        psi_all[:, 0] = psi
    null = isinstance(protocol.variant, NullVariant)
    for k in range(N):
        Phi = TWO_PI * k * dt / protocol.T
        if null:
            psi, r, lw = _null_step(psi, u[:, k], Theta, Phi, protocol.variant.c, dt, protocol.T)
        else:
            a = mean_readout(Theta, Phi, theta, phi)
            r = readout_from_draws(a, u[:, k], z[:, k], dt, tau)
            psi, lw = kraus_step_spinors(psi, r, Theta, Phi, dt, tau)
        theta, phi, chi = angles_from_spinor(psi, phi, chi)
        logw += lw
        if keep_paths:
            paths["theta"][:, k + 1], paths["phi"][:, k + 1], paths["chi"][:, k + 1] = theta, phi, chi
            r_all[:, k] = r
            lw_all[:, k] = lw
            psi_all[:, k + 1] = psi
    out = {"theta": theta, "phi": phi, "chi": chi, "log_weight": logw}
    if keep_paths:
        out.update(paths=paths, readouts=r_all, step_log_weights=lw_all, spinors=psi_all)
    return out


def _records_from_batch(protocol, res) -> list[TrajectoryRecord]:
    times = protocol.times
    p = res["paths"]
    return [TrajectoryRecord(times, p["theta"][i], p["phi"][i], p["chi"][i],
                             res["readouts"][i], res["step_log_weights"][i], res["spinors"][i])
            for i in range(p["theta"].shape[0])]


def propagate_sampled(protocol: MeasurementProtocol, init: BlochState,
                      rng: np.random.Generator) -> TrajectoryRecord:
    """Sample one trajectory with exact readouts and exact Kraus updates."""
    N = protocol.N
    u = rng.random(N)[None, :]
    z = rng.standard_normal(N)[None, :]
    res = _kraus_batch(protocol, init, u, z, keep_paths=True)
    return _records_from_batch(protocol, res)[0]


def run_ensemble(protocol: MeasurementProtocol, init: BlochState, n_traj: int, seed: int,
                 threads: int = 1, keep_paths: bool = False) -> EnsembleSummary:
    """Run ``n_traj`` independent sampled trajectories.

    Trajectory ``i`` always uses substream ``i`` of ``seed``; chunking is
    fixed, so the summary is identical for any thread count.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be at least 1")
    chunks = [np.arange(s, min(s + ENSEMBLE_CHUNK, n_traj))
              for s in range(0, n_traj, ENSEMBLE_CHUNK)]

    def work(idx):
        u, z = _draws(seed, idx, protocol.N)
        return _kraus_batch(protocol, init, u, z, keep_paths)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    cat = lambda key: np.concatenate([r[key] for r in results])
    records = None
    if keep_paths:
        records = [rec for r in results for rec in _records_from_batch(protocol, r)]
    return EnsembleSummary(n_traj, seed, cat("phi"), cat("chi"), cat("theta"),
                           cat("log_weight"), init.phi, records)


def self_closing_counts(summary: EnsembleSummary, bin_width: float = 0.1) -> SelfClosingStats:
    d = summary.phi_final - summary.phi_initial
    nw = int(np.sum(np.abs(d - TWO_PI) < bin_width / 2))
    n0 = int(np.sum(np.abs(d) < bin_width / 2))
    return SelfClosingStats(summary.n_traj, nw, n0)


def self_closing_stats(summary: EnsembleSummary, bin_width: float = 0.1):
    """Winding and non-winding return fractions and their ratio.

    Raises ``EmptyBin`` (carrying the counts) if either bin is empty.
    """
    s = self_closing_counts(summary, bin_width)
    if s.n_winding == 0 or s.n_nonwinding == 0:
        raise EmptyBin("empty self-closing bin", s.n_winding, s.n_nonwinding, s.n_total)
    return s.P_winding, s.P_nonwinding, s.R_empirical


def _clopper_pearson(k, n, level):
    alpha = 1.0 - level
    lo = 0.0 if k == 0 else stats.beta.ppf(alpha / 2, k, n - k + 1)
    hi = 1.0 if k == n else stats.beta.ppf(1 - alpha / 2, k + 1, n - k)
    return lo, hi


def ratio_confidence_interval(summary: EnsembleSummary, bin_width: float = 0.1,
                              level: float = 0.95, n_boot: int = 4000, seed: int = 0):
    """Bootstrap interval for the winding to non-winding ratio.

    Trajectories are resampled with replacement and the percentile interval
    of the ratio is returned.  When the winding bin is empty the ratio
    estimate is zero and resampling cannot move it, so the interval falls
    back to ``[0, upper]`` with the upper end from exact binomial bounds on
    the two counts.
    """
    s = self_closing_counts(summary, bin_width)
    n = s.n_total
    if s.n_nonwinding == 0:
        return 0.0, np.inf
    if s.n_winding == 0:
        _, pw_hi = _clopper_pearson(0, n, level)
        pn_lo, _ = _clopper_pearson(s.n_nonwinding, n, level)
        return 0.0, float(pw_hi / pn_lo)
    rng = np.random.default_rng(seed)
    d = summary.phi_final - summary.phi_initial
    isw = (np.abs(d - TWO_PI) < bin_width / 2).astype(float)
    isn = (np.abs(d) < bin_width / 2).astype(float)
    idx = rng.integers(0, n, size=(n_boot, n))
    w = isw[idx].sum(axis=1)
    m = isn[idx].sum(axis=1)
    ratio = np.where(m > 0, w / np.maximum(m, 1), np.inf)
    alpha = 1.0 - level
    lo, hi = np.quantile(ratio, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


Record = Callable[[float], float] | str | np.ndarray


def _spinor_rk4(psi, t, dt, Theta, tau, T, rfun):
    Phi = lambda s: TWO_PI * s / T

    def F(p, s):
        return spinor_rhs(p, rfun(p, s), Theta, Phi(s), tau)

    k1 = F(psi, t)
    k2 = F(psi + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = F(psi + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = F(psi + dt * k3, t + dt)
    new = psi + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return new / np.linalg.norm(new, axis=-1, keepdims=True)


def _readout_function(record, Theta, T):
    if isinstance(record, str):
        if record != "greedy":
            raise ValueError(f"unknown record rule {record!r}")

        def rfun(p, s):
            x = bloch_from_spinor(p)
            Phi = TWO_PI * s / T
            return (x[..., 0] * np.sin(Theta) * np.cos(Phi) + x[..., 1] * np.sin(Theta) * np.sin(Phi)
                    + x[..., 2] * np.cos(Theta))
        return rfun
    if callable(record):
        return lambda p, s: record(s)
    raise TypeError("record must be 'greedy' or a callable r(t) in ODE mode")


def propagate_family(Thetas, tau: float, N: int, theta0, phi0, record: Record,
                     T: float = 1.0) -> dict:
    """Propagate a batch of record-driven trajectories in spinor form.

    ``Thetas``, ``theta0`` and ``phi0`` broadcast to a common batch shape.
    Returns arrays of shape ``(B, N+1)`` for the angles and the spinors.
    """
    Thetas, theta0, phi0 = np.broadcast_arrays(np.atleast_1d(np.asarray(Thetas, float)),
                                               np.asarray(theta0, float), np.asarray(phi0, float))
    Thetas = Thetas.ravel()
    theta0 = theta0.ravel()
    phi0 = phi0.ravel()
    dt = T / N
    B = Thetas.size
    rfun = _readout_function(record, Thetas, T)
    psi = spinor(theta0, phi0, 0.0)
    out_psi = np.empty((B, N + 1, 2), dtype=complex)
    th = np.empty((B, N + 1))
    ph = np.empty((B, N + 1))
    ch = np.empty((B, N + 1))
    r_all = np.empty((B, N))
    out_psi[:, 0] = psi
    th[:, 0], ph[:, 0], ch[:, 0] = theta0, phi0, 0.0
    for k in range(N):
        t = k * dt
        r_all[:, k] = rfun(psi, t)
        psi = _spinor_rk4(psi, t, dt, Thetas, tau, T, rfun)
        out_psi[:, k + 1] = psi
        th[:, k + 1], ph[:, k + 1], ch[:, k + 1] = angles_from_spinor(psi, ph[:, k], ch[:, k])
    return {"theta": th, "phi": ph, "chi": ch, "spinors": out_psi, "readouts": r_all,
            "times": np.linspace(0.0, T, N + 1), "Thetas": Thetas}


def _angle_rhs(y, t, Theta, tau, T, rfun_angles):
    theta, phi, _ = y
    st = np.sin(theta)
    if abs(st) < 1e-9:
        raise SingularCoordinate("angle integration reached a pole")
    x = phi - TWO_PI * t / T
    sT = np.sin(Theta)
    f = sT * np.sin(x) / st
    g = np.cos(theta) * sT * np.cos(x) - st * np.cos(Theta)
    h = np.tan(theta / 2) * sT * np.sin(x)
    k = rfun_angles(theta, phi, t) / tau
    return np.array([k * g, -k * f, 0.5 * k * h])


def propagate_with_record(protocol: MeasurementProtocol, init: BlochState, record: Record,
                          mode: str = "ode", method: str = "spinor") -> TrajectoryRecord:
    """Propagate a trajectory along a prescribed readout record.

    ``record`` is ``"greedy"`` (readout equal to the running mean), a
    callable ``r(t)``, or in ``mode="kraus"`` an array of ``N`` readouts.
    ``method="angles"`` integrates the polar-coordinate equations directly
    and raises ``SingularCoordinate`` near a pole.
    """
    N, dt, tau, Theta, T = protocol.N, protocol.dt, protocol.tau, protocol.Theta, protocol.T
    times = protocol.times
    if mode == "kraus":
        rs = np.asarray(record, float) if not callable(record) else np.array(
            [record(t) for t in times[:-1]])
        if rs.shape != (N,):
            raise ValueError("kraus mode needs N readouts")
        psi = init.spinor()[None, :]
        th, ph, ch = [init.theta], [init.phi], [init.chi]
        lws, psis = [], [psi[0]]
        for k in range(N):
            Phi = TWO_PI * times[k] / T
            psi, lw = kraus_step_spinors(psi, rs[k], Theta, Phi, dt, tau)
            a, b, c = angles_from_spinor(psi, np.array([ph[-1]]), np.array([ch[-1]]))
            th.append(float(a[0])); ph.append(float(b[0])); ch.append(float(c[0]))
            lws.append(float(lw[0]))
            psis.append(psi[0])
        return TrajectoryRecord(times, np.array(th), np.array(ph), np.array(ch), rs,
                                np.array(lws), np.array(psis))
    if mode != "ode":
        raise ValueError(f"unknown mode {mode!r}")
    if method == "spinor":
        fam = propagate_family(Theta, tau, N, init.theta, init.phi, record, T)
        th, ph, ch = fam["theta"][0], fam["phi"][0], fam["chi"][0] + init.chi
        rs = fam["readouts"][0]
        psis = fam["spinors"][0] * np.exp(1j * init.chi)
    elif method == "angles":
        if isinstance(record, str):
            rfa = lambda th_, ph_, t: mean_readout(Theta, TWO_PI * t / T, th_, ph_)
        else:
            rfa = lambda th_, ph_, t: record(t)
        y = np.array([init.theta, init.phi, init.chi])
        ys = [y]
        rs = np.empty(N)
        for k in range(N):
            t = times[k]
            rs[k] = rfa(y[0], y[1], t)
            k1 = _angle_rhs(y, t, Theta, tau, T, rfa)
            k2 = _angle_rhs(y + 0.5 * dt * k1, t + 0.5 * dt, Theta, tau, T, rfa)
            k3 = _angle_rhs(y + 0.5 * dt * k2, t + 0.5 * dt, Theta, tau, T, rfa)
            k4 = _angle_rhs(y + dt * k3, t + dt, Theta, tau, T, rfa)
            y = y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            ys.append(y)
        ys = np.array(ys)
        th, ph, ch = ys[:, 0], ys[:, 1], ys[:, 2]
        psis = spinor(th, ph, ch)
    else:
        raise ValueError(f"unknown method {method!r}")
    a = mean_readout(Theta, TWO_PI * times[:-1] / T, th[:-1], ph[:-1])
    lws = log_readout_density(rs, a, dt, tau)
    return TrajectoryRecord(times, th, ph, ch, rs, lws, psis)
