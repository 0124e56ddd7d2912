"""Extremal (most-likely) trajectories and the transitions between them.

The Hamilton system is integrated in Cartesian Bloch coordinates, which
are free of the polar-chart singularities.  With ``x`` the Bloch vector,
``n(t)`` the axis, ``a = n.x`` and a Cartesian momentum ``p``:

    r   = a + p.(n - a x) + p_chi h / 2
    x'  = (r / tau) (n - a x)
    p'  = (r / tau) ((p.x - 1) n + a p - p_chi grad(h) / 2)
    S'  = (r (2a - r) - 1) / (2 tau)

``h = -(x cross n)_z / (1 + x_z)`` is the phase back-action in the
north-pole spinor chart.  Polar momenta map to Cartesian ones through
``p = p_theta e_theta + (p_phi / sin theta) e_phi``.  The spinor is carried
along so the accumulated phase ``chi`` comes out of the same integration.

Boundary-value problems are solved by Newton shooting on the two initial
momenta.  Many independent problems (for example a whole latitude grid)
are advanced as one batch.  A four-segment multiple-shooting solve takes
over when single shooting does not converge.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .action import closed_loop_action_rate, equilibrium_angles, equilibrium_momenta
from .bloch import TWO_PI, MeasurementProtocol, angles_from_spinor, spinor, spinor_rhs, wrap_angle
from .errors import (
    BranchLost,
    NoBracket,
    NoConvergence,
    SingularCoordinate,
    SingularJacobian,
)

SHOOTING_TOL = 1e-9
MERGE_TOL = 1e-4
JUMP_FACTOR = 10.0


@dataclass(frozen=True)
class BoundaryCondition:
    """Endpoint data for an extremal path.

    ``final`` is ``"closed"`` (return to the initial angles after ``winding``
    turns), ``"fixed"`` (reach ``theta_T``, ``phi_T`` with ``phi_T`` unwrapped)
    or ``"free"`` (vanishing final momenta).  ``p_chi`` is the conserved
    momentum of the phase coordinate; zero means the final phase is free.
    """

    theta0: float
    phi0: float
    chi0: float = 0.0
    final: str = "closed"
    winding: int = 0
    theta_T: float | None = None
    phi_T: float | None = None
    p_chi: float = 0.0

    def __post_init__(self):
        if self.final not in ("closed", "fixed", "free"):
            raise ValueError(f"unknown final condition {self.final!r}")
        if self.final == "fixed" and (self.theta_T is None or self.phi_T is None):
            raise ValueError("fixed final condition needs theta_T and phi_T")
        if int(self.winding) != self.winding:
            raise ValueError("winding must be an integer")

    def target(self):
        if self.final == "closed":
            return self.theta0, self.phi0 + TWO_PI * self.winding
        if self.final == "fixed":
            return self.theta_T, self.phi_T
        return None


@dataclass
class BranchSolution:
    winding: int
    Theta: float
    tau: float
    times: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    chi: np.ndarray
    p_phi: np.ndarray
    p_theta: np.ndarray
    p_chi: float
    r: np.ndarray
    action: float
    converged: bool
    shooting_residual: float
    initial_momenta: tuple[float, float]
    bloch: np.ndarray = field(repr=False, default=None)

    @property
    def density(self) -> float:
        return float(np.exp(self.action))

    @property
    def geometric_phase(self) -> float:
        return float(self.chi[-1] - self.chi[0])

    def distance(self, other: "BranchSolution") -> float:
        """Sup-norm distance between two paths on a shared time grid."""
        if self.bloch is None or other.bloch is None or self.bloch.shape != other.bloch.shape:
            raise ValueError("paths must share a time grid")
        return float(np.max(np.linalg.norm(self.bloch - other.bloch, axis=-1)))


def _frame(theta, phi):
    ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
    x = np.stack([st * cp, st * sp, ct], axis=-1)
    e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e_phi = np.stack([-sp, cp, np.zeros_like(cp)], axis=-1)
    return x, e_theta, e_phi


def cartesian_momentum(theta, phi, p_phi, p_theta):
    st = np.sin(theta)
    if np.any(np.abs(st) < 1e-12):
        raise SingularCoordinate("polar momenta undefined at a pole")
    _, et, ep = _frame(theta, phi)
    return np.asarray(p_theta)[..., None] * et + (np.asarray(p_phi) / st)[..., None] * ep


def polar_momentum(x, p):
    theta = np.arccos(np.clip(x[..., 2], -1.0, 1.0))
    phi = np.arctan2(x[..., 1], x[..., 0])
    _, et, ep = _frame(theta, phi)
    return np.sin(theta) * np.sum(p * ep, axis=-1), np.sum(p * et, axis=-1)


def _axis(t, Theta, T):
    Phi = TWO_PI * t / T
    sT = np.sin(Theta)
    return np.stack(np.broadcast_arrays(sT * np.cos(Phi), sT * np.sin(Phi), np.cos(Theta)), axis=-1)


def _rhs(t, x, p, Theta, tau, p_chi, T):
    return _rhs_axis(_axis(t, Theta, T), x, p, tau, p_chi, np.any(p_chi != 0.0))


def _rhs_axis(n, x, p, tau, p_chi, with_chi):
    a = np.einsum("...i,...i->...", n, x)
    tang = n - a[..., None] * x
    r = a + np.einsum("...i,...i->...", p, tang)
    pd_n = np.einsum("...i,...i->...", p, x) - 1.0
    if with_chi:
        cz = x[..., 0] * n[..., 1] - x[..., 1] * n[..., 0]
        on = p_chi != 0.0
        den = np.where(on, 1.0 + x[..., 2], 1.0)
        r = r + 0.5 * p_chi * np.where(on, -cz / den, 0.0)
        grad_h = np.stack([-n[..., 1] / den, n[..., 0] / den, cz / den ** 2], axis=-1)
        grad_h = np.where(on[..., None], grad_h, 0.0)
    k = (r / tau)[..., None]
    xd = k * tang
    pd = k * (pd_n[..., None] * n + a[..., None] * p)
    if with_chi:
        pd = pd - k * 0.5 * p_chi[..., None] * grad_h
    Sd = (r * (2 * a - r) - 1.0) / (2 * tau)
    return xd, pd, Sd, r


def _flow(x, p, psi, t0, h, nsteps, Theta, tau, p_chi, T, keep=False):
    """RK4 for a batch of Hamilton trajectories plus their spinors.

    All of ``Theta``, ``tau``, ``p_chi`` and ``t0`` have the batch shape.
    Returns final values and, with ``keep``, the sampled paths.  The
    spinor only feeds the phase output, so it is carried only with ``keep``.
    """
    B = x.shape[0]
    S = np.zeros(B)
    dphi = np.zeros(B)
    az = np.arctan2(x[:, 1], x[:, 0])
    with_chi = bool(np.any(p_chi != 0.0))
    sT, cT = np.sin(Theta), np.cos(Theta)
    if keep:
        xs = np.empty((B, nsteps + 1, 3)); ps = np.empty((B, nsteps + 1, 3))
        psis = np.empty((B, nsteps + 1, 2), dtype=complex)
        rs = np.empty((B, nsteps + 1)); Ss = np.empty((B, nsteps + 1))
        xs[:, 0], ps[:, 0], psis[:, 0], Ss[:, 0] = x, p, psi, 0.0

    def axis_at(s):
        Phi = TWO_PI * s / T
        return np.stack([sT * np.cos(Phi), sT * np.sin(Phi), cT], axis=-1), Phi

    def F(n, Phi, x_, p_, psi_):
        xd, pd, Sd, r = _rhs_axis(n, x_, p_, tau, p_chi, with_chi)
        q = spinor_rhs(psi_, r, Theta, Phi, tau) if keep else None
        return xd, pd, Sd, q, r

    n_next = axis_at(t0 + 0 * h)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(nsteps):
            t = t0 + k * h
            n0, n_half, n1 = n_next, axis_at(t + h / 2), axis_at(t + h)
            n_next = n1
            x1, p1, S1, q1, r0 = F(*n0, x, p, psi)
            x2, p2, S2, q2, _ = F(*n_half, x + h / 2 * x1, p + h / 2 * p1,
                                  psi + h / 2 * q1 if keep else None)
            x3, p3, S3, q3, _ = F(*n_half, x + h / 2 * x2, p + h / 2 * p2,
                                  psi + h / 2 * q2 if keep else None)
            x4, p4, S4, q4, _ = F(*n1, x + h * x3, p + h * p3, psi + h * q3 if keep else None)
            x = x + h / 6 * (x1 + 2 * x2 + 2 * x3 + x4)
            x = x / np.linalg.norm(x, axis=-1, keepdims=True)
            p = p + h / 6 * (p1 + 2 * p2 + 2 * p3 + p4)
            # p and p + lambda x describe the same covector on the sphere
            p = p - np.einsum("...i,...i->...", p, x)[..., None] * x
            if keep:
                psi = psi + h / 6 * (q1 + 2 * q2 + 2 * q3 + q4)
                psi = psi / np.linalg.norm(psi, axis=-1, keepdims=True)
            S = S + h / 6 * (S1 + 2 * S2 + 2 * S3 + S4)
            az_new = np.arctan2(x[:, 1], x[:, 0])
            dphi += wrap_angle(az_new - az)
            az = az_new
            if keep:
                xs[:, k + 1], ps[:, k + 1], psis[:, k + 1], Ss[:, k + 1] = x, p, psi, S
                rs[:, k] = r0
        if keep:
            rs[:, -1] = _rhs(t0 + nsteps * h, x, p, Theta, tau, p_chi, T)[3]
    out = dict(x=x, p=p, psi=psi, S=S, dphi=dphi)
    if keep:
        out.update(xs=xs, ps=ps, psis=psis, rs=rs, Ss=Ss)
    return out


def _bcast(B, *vals):
    return [np.broadcast_to(np.asarray(v, float), (B,)).copy() for v in vals]


def _residual(out, theta0, phi0, kind, target_theta, target_dphi):
    x = out["x"]
    thT = np.arccos(np.clip(x[:, 2], -1.0, 1.0))
    if kind == "free":
        pp, pt = polar_momentum(x, out["p"])
        return np.stack([pt, pp], axis=-1)
    return np.stack([thT - target_theta, out["dphi"] - target_dphi], axis=-1)


@dataclass
class _Problems:
    """A batch of independent shooting problems of the same kind."""

    Theta: np.ndarray
    tau: np.ndarray
    theta0: np.ndarray
    phi0: np.ndarray
    p_chi: np.ndarray
    kind: str
    target_theta: np.ndarray
    target_dphi: np.ndarray
    N: int
    T: float = 1.0

    def take(self, idx):
        sel = lambda v: v[idx]
        return replace(self, Theta=sel(self.Theta), tau=sel(self.tau), theta0=sel(self.theta0),
                       phi0=sel(self.phi0), p_chi=sel(self.p_chi),
                       target_theta=sel(self.target_theta), target_dphi=sel(self.target_dphi))

    def tile(self, reps):
        rep = lambda v: np.tile(v, reps)
        return replace(self, Theta=rep(self.Theta), tau=rep(self.tau), theta0=rep(self.theta0),
                       phi0=rep(self.phi0), p_chi=rep(self.p_chi),
                       target_theta=rep(self.target_theta), target_dphi=rep(self.target_dphi))

    def shoot(self, u, keep=False):
        x0, _, _ = _frame(self.theta0, self.phi0)
        p0 = cartesian_momentum(self.theta0, self.phi0, u[:, 0], u[:, 1])
        psi0 = spinor(self.theta0, self.phi0, 0.0)
        out = _flow(x0, p0, psi0, np.zeros(len(u)), self.T / self.N, self.N, self.Theta,
                    self.tau, self.p_chi, self.T, keep)
        F = _residual(out, self.theta0, self.phi0, self.kind, self.target_theta, self.target_dphi)
        return F, out


def _newton_batch(probs: _Problems, u0, tol=SHOOTING_TOL, maxit=40):
    """Damped Newton on the initial momenta, all problems advanced together."""
    u = np.array(u0, float)
    B = len(u)
    done = np.zeros(B, bool)
    res = np.full(B, np.inf)
    tiled3 = probs.tile(3)
    halvings = 2.0 ** -np.arange(8)
    tiled_ls = probs.tile(len(halvings))
    for _ in range(maxit):
        eps = 1e-7 * np.maximum(1.0, np.abs(u))
        U = np.concatenate([u, u + np.array([1.0, 0.0]) * eps, u + np.array([0.0, 1.0]) * eps])
        Fall, _ = tiled3.shoot(U)
        F0 = Fall[:B]
        res = np.max(np.abs(F0), axis=1)
        res = np.where(np.isfinite(res), res, np.inf)
        done = res < tol
        if done.all():
            break
        J = np.stack([(Fall[B:2 * B] - F0) / eps[:, :1], (Fall[2 * B:] - F0) / eps[:, 1:]], axis=-1)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        ok = np.isfinite(det) & (np.abs(det) > 1e-300) & np.isfinite(F0).all(axis=1)
        safe = np.where(ok, det, 1.0)
        du = -np.stack([J[:, 1, 1] * F0[:, 0] - J[:, 0, 1] * F0[:, 1],
                        -J[:, 1, 0] * F0[:, 0] + J[:, 0, 0] * F0[:, 1]], axis=-1) / safe[:, None]
        du = np.where((ok & ~done)[:, None], du, 0.0)
        trial = np.concatenate([u + lam * du for lam in halvings])
        Ft, _ = tiled_ls.shoot(trial)
        nt = np.max(np.abs(Ft), axis=1).reshape(len(halvings), B)
        nt = np.where(np.isfinite(nt), nt, np.inf)
        better = nt < res[None, :]
        first = np.argmax(better, axis=0)
        any_better = better.any(axis=0)
        lam = np.where(any_better, halvings[first], 0.0)
        step_taken = np.where((ok & ~done)[:, None], lam[:, None] * du, 0.0)
        if not np.any(step_taken):
            break
        u = u + step_taken
    Fall, _ = probs.shoot(u)
    res = np.max(np.abs(Fall), axis=1)
    res = np.where(np.isfinite(res), res, np.inf)
    return u, res, res < tol


def _multiple_shoot(probs: _Problems, u0, nodes_guess=None, segments=4, tol=SHOOTING_TOL,
                    maxit=60):
    """Gauss-Newton multiple shooting for a single problem.

    Unknowns are the two initial momenta plus ``(theta, phi, p_theta, p_phi)``
    at every interior node.  ``nodes_guess`` is an ``(segments-1, 4)`` array;
    without one the guess trajectory itself is sampled.
    """
    if len(probs.Theta) != 1:
        raise ValueError("multiple shooting handles one problem at a time")
    N, T = probs.N, probs.T
    if N % segments:
        raise ValueError("step count must be divisible by the segment count")
    m = N // segments
    h = T / N
    th0, ph0 = float(probs.theta0[0]), float(probs.phi0[0])
    if nodes_guess is None:
        _, out = probs.shoot(np.asarray(u0, float)[None, :], keep=True)
        xs, ps = out["xs"][0], out["ps"][0]
        nodes = []
        dph = np.concatenate([[0.0], np.cumsum(wrap_angle(np.diff(np.arctan2(xs[:, 1], xs[:, 0]))))])
        for j in range(1, segments):
            xj = xs[j * m]
            pp, pt = polar_momentum(xj, ps[j * m])
            nodes.append([np.arccos(np.clip(xj[2], -1, 1)), ph0 + dph[j * m], pt, pp])
        nodes_guess = np.array(nodes)
    z = np.concatenate([np.asarray(u0, float), np.asarray(nodes_guess, float).ravel()])
    nz = len(z)
    base = lambda v: np.full(segments, v)
    Theta, tau, p_chi = base(probs.Theta[0]), base(probs.tau[0]), base(probs.p_chi[0])
    t_start = np.arange(segments) * m * h

    def F_many(Z):
        K = Z.shape[0]
        th = np.empty((K, segments)); ph = np.empty((K, segments))
        pt = np.empty((K, segments)); pp = np.empty((K, segments))
        th[:, 0], ph[:, 0], pp[:, 0], pt[:, 0] = th0, ph0, Z[:, 0], Z[:, 1]
        nd = Z[:, 2:].reshape(K, segments - 1, 4)
        th[:, 1:], ph[:, 1:], pt[:, 1:], pp[:, 1:] = nd[..., 0], nd[..., 1], nd[..., 2], nd[..., 3]
        x0, _, _ = _frame(th.ravel(), ph.ravel())
        p0 = cartesian_momentum(th.ravel(), ph.ravel(), pp.ravel(), pt.ravel())
        psi0 = spinor(th.ravel(), ph.ravel(), 0.0)
        out = _flow(x0, p0, psi0, np.tile(t_start, K), h, m, np.tile(Theta, K), np.tile(tau, K),
                    np.tile(p_chi, K), T)
        xe = out["x"].reshape(K, segments, 3)
        the = np.arccos(np.clip(xe[..., 2], -1, 1))
        phe = ph + out["dphi"].reshape(K, segments)
        ppe, pte = polar_momentum(out["x"], out["p"])
        ppe, pte = ppe.reshape(K, segments), pte.reshape(K, segments)
        res = [th[:, 1:] - the[:, :-1], ph[:, 1:] - phe[:, :-1],
               pt[:, 1:] - pte[:, :-1], pp[:, 1:] - ppe[:, :-1]]
        R = np.stack(res, axis=-1).reshape(K, -1)
        if probs.kind == "free":
            last = np.stack([pte[:, -1], ppe[:, -1]], axis=-1)
        else:
            last = np.stack([the[:, -1] - probs.target_theta[0],
                             phe[:, -1] - (ph0 + probs.target_dphi[0])], axis=-1)
        return np.concatenate([R, last], axis=1)

    res = np.inf
    for _ in range(maxit):
        eps = 1e-7 * np.maximum(1.0, np.abs(z))
        Z = np.vstack([z, z + np.diag(eps)])
        Fs = F_many(Z)
        F0 = Fs[0]
        res = float(np.max(np.abs(F0))) if np.all(np.isfinite(F0)) else np.inf
        if res < tol:
            break
        J = (Fs[1:] - F0).T / eps
        if not np.all(np.isfinite(J)):
            raise SingularJacobian("non-finite multiple-shooting Jacobian")
        dz = np.linalg.lstsq(J, -F0, rcond=None)[0]
        for lam in 2.0 ** -np.arange(10):
            Ft = F_many((z + lam * dz)[None, :])[0]
            rt = float(np.max(np.abs(Ft))) if np.all(np.isfinite(Ft)) else np.inf
            if rt < res:
                z = z + lam * dz
                break
        else:
            break
    return z[:2], res, res < tol


def _solution_from_shot(probs: _Problems, u, res, ok, winding, chi0=0.0):
    """Re-integrate converged problems and package the paths."""
    _, out = probs.shoot(u, keep=True)
    sols = []
    N = probs.N
    times = np.linspace(0.0, probs.T, N + 1)
    B = len(u)
    TH = np.empty((B, N + 1)); PH = np.empty((B, N + 1)); CH = np.empty((B, N + 1))
    TH[:, 0], PH[:, 0], CH[:, 0] = probs.theta0, probs.phi0, 0.0
    for k in range(N):
        TH[:, k + 1], PH[:, k + 1], CH[:, k + 1] = angles_from_spinor(
            out["psis"][:, k + 1], PH[:, k], CH[:, k])
    for i in range(B):
        xs = out["xs"][i]
        th, ph, ch = TH[i], PH[i], CH[i]
        pp, pt = polar_momentum(xs, out["ps"][i])
        w = winding[i] if np.ndim(winding) else winding
        sols.append(BranchSolution(
            winding=int(w), Theta=float(probs.Theta[i]), tau=float(probs.tau[i]), times=times,
            theta=th, phi=ph, chi=ch + chi0, p_phi=pp, p_theta=pt, p_chi=float(probs.p_chi[i]),
            r=out["rs"][i], action=float(out["Ss"][i, -1]), converged=bool(ok[i]),
            shooting_residual=float(res[i]), initial_momenta=(float(u[i, 0]), float(u[i, 1])),
            bloch=xs))
    return sols


def _problems_from_bc(protocols, bcs) -> _Problems:
    B = len(bcs)
    kinds = {bc.final for bc in bcs}
    if len(kinds) != 1:
        raise ValueError("a batch must share the final-condition kind")
    kind = kinds.pop()
    Ns = {pr.N for pr in protocols}
    Ts = {pr.T for pr in protocols}
    if len(Ns) != 1 or len(Ts) != 1:
        raise ValueError("a batch must share the time grid")
    tt, td = [], []
    for bc in bcs:
        tgt = bc.target()
        if tgt is None:
            tt.append(0.0); td.append(0.0)
        else:
            tt.append(tgt[0]); td.append(tgt[1] - bc.phi0)
    f = lambda vals: np.array(vals, float)
    return _Problems(f([pr.Theta for pr in protocols]), f([pr.tau for pr in protocols]),
                     f([bc.theta0 for bc in bcs]), f([bc.phi0 for bc in bcs]),
                     f([bc.p_chi for bc in bcs]), kind, f(tt), f(td), Ns.pop(), Ts.pop())


def _check_start(bc):
    if min(bc.theta0, np.pi - bc.theta0) < 1e-9:
        raise SingularCoordinate("initial state at a pole; polar momenta undefined")


def solve_bvp_batch(protocols, bcs, guesses, fallback=True) -> list[BranchSolution]:
    """Solve several boundary-value problems with one batched Newton run."""
    for bc in bcs:
        _check_start(bc)
    probs = _problems_from_bc(protocols, bcs)
    u, res, ok = _newton_batch(probs, np.asarray(guesses, float).reshape(-1, 2))
    if fallback and probs.N % 4 == 0:
        for i in np.flatnonzero(~ok):
            try:
                ui, ri, oki = _multiple_shoot(probs.take([i]), u[i])
            except SingularJacobian:
                continue
            if oki:
                u[i], res[i], ok[i] = ui, ri, oki
    wind = [bc.winding for bc in bcs]
    return _solution_from_shot(probs, u, res, ok, wind, 0.0)


def _is_equator_loop(protocol, bc) -> bool:
    phi_e = -np.arctan(TWO_PI * protocol.tau)
    return (bc.final == "closed" and bc.p_chi == 0.0 and protocol.N % 2 == 0
            and abs(protocol.Theta - np.pi / 2) < 1e-12 and abs(bc.theta0 - np.pi / 2) < 1e-12
            and abs(wrap_angle(bc.phi0 - phi_e)) < 1e-12)


def solve_bvp(protocol: MeasurementProtocol, bc: BoundaryCondition, init_guess) -> BranchSolution:
    """Extremal path for one boundary-value problem.

    ``init_guess`` is the pair of initial momenta ``(p_phi, p_theta)`` or a
    ``BranchSolution`` to continue from.  Closed loops on the equator that
    start at the equilibrium azimuth go to the reduced equator problem,
    whose only unknown is ``p_phi(0)``.  Raises ``NoConvergence`` when
    neither single nor multiple shooting reaches the residual tolerance.
    """
    _check_start(bc)
    nodes = None
    if _is_equator_loop(protocol, bc):
        p0 = init_guess.initial_momenta[0] if isinstance(init_guess, BranchSolution) else \
            float(np.asarray(init_guess, float).ravel()[0])
        return solve_equator(protocol.tau, bc.winding, p0, protocol.N, protocol.T)
    if isinstance(init_guess, BranchSolution):
        guess = np.array(init_guess.initial_momenta)
        if init_guess.times.shape[0] == protocol.N + 1:
            m = protocol.N // 4
            nodes = np.array([[init_guess.theta[j * m], init_guess.phi[j * m] - init_guess.phi[0] + bc.phi0,
                               init_guess.p_theta[j * m], init_guess.p_phi[j * m]] for j in (1, 2, 3)])
    else:
        guess = np.asarray(init_guess, float)
    probs = _problems_from_bc([protocol], [bc])
    u, res, ok = _newton_batch(probs, guess[None, :])
    if not ok[0] and protocol.N % 4 == 0:
        try:
            ui, ri, oki = _multiple_shoot(probs, guess, nodes)
        except SingularJacobian:
            oki = False
        if oki:
            u, res, ok = ui[None, :], np.array([ri]), np.array([True])
    if not ok[0]:
        raise NoConvergence(f"shooting residual {res[0]:.3e} above {SHOOTING_TOL}")
    sol = _solution_from_shot(probs, u, res, ok, bc.winding, bc.chi0)[0]
    if bc.final == "closed" and round((sol.phi[-1] - sol.phi[0]) / TWO_PI) != bc.winding:
        raise NoConvergence("converged to a different winding sector")
    return sol


# ---------------------------------------------------------------------------
# equator reduction


def _equator_rhs(t, phi, p, tau, T):
    y = TWO_PI * t / T - phi
    s, c = np.sin(y), np.cos(y)
    r = c + p * s
    return r / tau * s, r / tau * (p * c - s), (r * (2 * c - r) - 1.0) / (2 * tau), r


def _equator_tangent(t, phi, p, tau, T, d):
    """Linearized equator vector field applied to the 2x2 tangent maps ``d``."""
    y = TWO_PI * t / T - phi
    s, c = np.sin(y), np.cos(y)
    r = c + p * s
    G = p * c - s
    r_phi = s - p * c
    a11 = (r_phi * s - r * c) / tau
    a12 = s * s / tau
    a21 = (r_phi * G + r * (p * s + c)) / tau
    a22 = (s * G + r * c) / tau
    A = np.stack([np.stack([a11, a12], -1), np.stack([a21, a22], -1)], -2)
    return A @ d


def _equator_segment_maps(t0, phi, p, tau, T, h, nsteps):
    """End points of RK4 segments and the exact derivative of the discrete map."""
    d = np.broadcast_to(np.eye(2), phi.shape + (2, 2)).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(nsteps):
            t = t0 + k * h
            a1, b1, _, _ = _equator_rhs(t, phi, p, tau, T)
            d1 = _equator_tangent(t, phi, p, tau, T, d)
            f2, p2 = phi + h / 2 * a1, p + h / 2 * b1
            a2, b2, _, _ = _equator_rhs(t + h / 2, f2, p2, tau, T)
            d2 = _equator_tangent(t + h / 2, f2, p2, tau, T, d + h / 2 * d1)
            f3, p3 = phi + h / 2 * a2, p + h / 2 * b2
            a3, b3, _, _ = _equator_rhs(t + h / 2, f3, p3, tau, T)
            d3 = _equator_tangent(t + h / 2, f3, p3, tau, T, d + h / 2 * d2)
            f4, p4 = phi + h * a3, p + h * b3
            a4, b4, _, _ = _equator_rhs(t + h, f4, p4, tau, T)
            d4 = _equator_tangent(t + h, f4, p4, tau, T, d + h * d3)
            phi = phi + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            p = p + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
            d = d + h / 6 * (d1 + 2 * d2 + 2 * d3 + d4)
    return phi, p, d


def _equator_rk4(t0, phi, p, tau, T, h, nsteps, keep=False):
    """RK4 for the reduced equator system, with per-element start times."""
    S = np.zeros_like(phi)
    if keep:
        shape = phi.shape + (nsteps + 1,)
        PH, P, SS, R = np.empty(shape), np.empty(shape), np.empty(shape), np.empty(shape)
        PH[..., 0], P[..., 0], SS[..., 0] = phi, p, 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(nsteps):
            t = t0 + k * h
            a1, b1, c1, r0 = _equator_rhs(t, phi, p, tau, T)
            a2, b2, c2, _ = _equator_rhs(t + h / 2, phi + h / 2 * a1, p + h / 2 * b1, tau, T)
            a3, b3, c3, _ = _equator_rhs(t + h / 2, phi + h / 2 * a2, p + h / 2 * b2, tau, T)
            a4, b4, c4, _ = _equator_rhs(t + h, phi + h * a3, p + h * b3, tau, T)
            phi = phi + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            p = p + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
            S = S + h / 6 * (c1 + 2 * c2 + 2 * c3 + c4)
            if keep:
                PH[..., k + 1], P[..., k + 1], SS[..., k + 1], R[..., k] = phi, p, S, r0
        if keep:
            R[..., -1] = _equator_rhs(t0 + nsteps * h, phi, p, tau, T)[3]
    out = dict(phi=phi, p=p, S=S)
    if keep:
        out.update(phis=PH, ps=P, Ss=SS, rs=R)
    return out


def equator_flow(p0, tau, N=2000, T=1.0, phi0=None, keep=False, horizon=None):
    """Integrate the reduced equator system for a batch of initial momenta.

    On the equator the polar momentum vanishes and the state stays at
    ``theta = pi/2``.  Integration runs over ``[0, horizon]`` (default one
    period) in ``N`` steps and returns final ``phi``, ``p_phi`` and action,
    plus the sampled paths with ``keep``.
    """
    p0 = np.atleast_1d(np.asarray(p0, float))
    tau = np.broadcast_to(np.asarray(tau, float), p0.shape)
    if phi0 is None:
        phi0 = -np.arctan(TWO_PI * tau)
    phi = np.broadcast_to(np.asarray(phi0, float), p0.shape).copy()
    horizon = T if horizon is None else horizon
    return _equator_rk4(np.zeros_like(phi), phi, p0.copy(), tau, T, horizon / N, N, keep)


def _equator_newton(tau, target_shift, p_guess, N, T, horizon, tol=SHOOTING_TOL, maxit=50):
    """Scalar shooting ``phi(horizon) = phi_e + target_shift`` for a batch of strengths.

    The cost of a flow is dominated by the step loop rather than the batch
    size, so each trial point is evaluated together with its
    finite-difference probe in a single call.
    """
    tau = np.atleast_1d(np.asarray(tau, float))
    n = tau.size
    p = np.broadcast_to(np.asarray(p_guess, float), tau.shape).copy()
    phi0 = -np.arctan(TWO_PI * tau)
    target = phi0 + target_shift

    def shoot(pp, k):
        eps = 1e-7 * np.maximum(1.0, np.abs(pp))
        out = equator_flow(np.concatenate([pp, pp + eps]), np.tile(tau, 2 * k), N, T,
                           np.tile(phi0, 2 * k), horizon=horizon)["phi"]
        F = out[: pp.size] - np.tile(target, k)
        return F, (out[pp.size:] - np.tile(target, k) - F) / eps

    F, d = shoot(p, 1)
    res = np.full(n, np.inf)
    prev = np.full(n, np.inf)
    done = np.zeros(n, bool)
    for _ in range(maxit):
        res = np.where(np.isfinite(F), np.abs(F), np.inf)
        # polish below tol while the residual still halves
        done |= (res < tol) & ~(res < 0.5 * prev)
        active = ~done
        if not active.any():
            break
        prev = res
        step = np.where(active & np.isfinite(d) & (d != 0), -F / np.where(d != 0, d, 1.0), 0.0)
        step = np.clip(step, -0.5, 0.5)
        # full step first; backtrack only where it fails to reduce the residual
        F_new, d_new = shoot(p + step, 1)
        ok = (np.abs(F_new) < res) | ~active
        lam = ok.astype(float)
        if not ok.all():
            lams = 2.0 ** -np.arange(1, 8)
            Ft, dt = shoot(np.concatenate([p + l * step for l in lams]), len(lams))
            Ft, dt = Ft.reshape(len(lams), n), dt.reshape(len(lams), n)
            better = np.abs(Ft) < res[None, :]
            first = np.argmax(better, axis=0)
            use = ~ok & better.any(axis=0)
            lam = np.where(use, lams[first], lam)
            F_new = np.where(use, Ft[first, np.arange(n)], F_new)
            d_new = np.where(use, dt[first, np.arange(n)], d_new)
        keep = lam == 0
        F_new = np.where(keep, F, F_new)
        d_new = np.where(keep, d, d_new)
        if not np.any(lam * step):
            break
        p = p + lam * step
        F, d = F_new, d_new
    return p, res, res < tol


def _equator_multiple_shoot(tau, target_shift, phis, ps, N, T, horizon, M=16,
                            tol=SHOOTING_TOL, maxit=200):
    """Multiple shooting for the reduced equator problem.

    ``phis`` and ``ps`` sample a guess path on the ``N``-step grid over
    ``[0, horizon]``.  The unknowns are the initial momentum and
    ``(phi, p)`` at ``M - 1`` interior nodes; each segment's end depends
    only on its own start, so the Jacobian is assembled from per-segment
    2x2 blocks.
    """
    if N % M:
        raise ValueError("step count must be divisible by the segment count")
    m = N // M
    h = horizon / N
    starts = np.arange(M) * m * h
    phi0 = float(-np.arctan(TWO_PI * tau))
    target = phi0 + target_shift
    nph = np.array(phis[::m][:M], float)
    npp = np.array(ps[::m][:M], float)
    nph[0] = phi0

    def segments(a, b):
        out = _equator_rk4(np.tile(starts, len(a) // M), a, b, tau, T, h, m)
        return out["phi"], out["p"]

    def residual(nph, npp):
        e_ph, e_p = segments(nph, npp)
        F = np.empty(2 * M - 1)
        F[0:2 * (M - 1):2] = nph[1:] - e_ph[:-1]
        F[1:2 * (M - 1):2] = npp[1:] - e_p[:-1]
        F[-1] = e_ph[-1] - target
        return F, e_ph, e_p

    def unpack(z):
        a = np.concatenate([[phi0], z[1::2]])
        b = np.concatenate([[z[0]], z[2::2]])
        return a, b

    def fun(z):
        F = residual(*unpack(z))[0]
        return np.where(np.isfinite(F), F, 1e6)

    def jac(z):
        _, _, D = _equator_segment_maps(starts, *unpack(z), tau, T, h, m)
        J = np.zeros((2 * M - 1, 2 * M - 1))
        for j in range(M):
            # column of phi_j is 2j - 1 (absent for j = 0), column of p_j is 2j
            if j < M - 1:
                rows, sgn = slice(2 * j, 2 * j + 2), -1.0
                J[2 * j, 2 * j + 1] = 1.0
                J[2 * j + 1, 2 * j + 2] = 1.0
                blk = D[j]
            else:
                rows, sgn = slice(2 * M - 2, 2 * M - 1), 1.0
                blk = D[j][:1]
            if j > 0:
                J[rows, 2 * j - 1] += sgn * blk[:, 0]
            J[rows, 2 * j] += sgn * blk[:, 1]
        return np.where(np.isfinite(J), J, 0.0)

    z0 = np.empty(2 * M - 1)
    z0[0] = npp[0]
    z0[1::2] = nph[1:]
    z0[2::2] = npp[1:]
    z, res = _damped_newton(fun, jac, z0, tol, maxit)
    if not res < tol and np.isfinite(res):
        z, res = _soft_mode_solve(fun, jac, z, tol)
    nph, npp = unpack(z)
    F = residual(nph, npp)[0]
    res = _max_abs(F)
    return nph, npp, res, res < tol


def _damped_newton(fun, jac, z, tol, maxit):
    """Newton iteration with step halving on the sup-norm of the residual.

    Iterates until the residual is below ``tol`` and stops improving, so
    the result sits at the round-off floor rather than just under ``tol``.
    """
    F = fun(z)
    res = _max_abs(F)
    for _ in range(maxit):
        step = np.linalg.lstsq(jac(z), F, rcond=None)[0]
        for lam in 2.0 ** -np.arange(12):
            trial = z - lam * step
            F_t = fun(trial)
            r_t = _max_abs(F_t)
            if r_t < res:
                break
        else:
            break
        improved = r_t < 0.5 * res
        z, F, res = trial, F_t, r_t
        if res < tol and not improved:
            break
    return z, res


def _soft_mode_solve(fun, jac, z, tol, maxit=30):
    """Root finding when one singular value of the Jacobian is tiny.

    Near-free modes (the timing of a fast jump at strong measurement) make
    Newton overshoot along the soft direction ``v``.  The residual is split
    along the left singular vector ``u``: the complementary equations are
    solved by Newton in the well-conditioned complement of ``v`` for each
    soft coordinate ``s``, and the scalar ``u . F(s)`` is zeroed by secant.
    """
    U, _, Vt = np.linalg.svd(jac(z))
    u, v, P, Q = U[:, -1], Vt[-1], U[:, :-1], Vt[:-1].T
    state = {"w": np.zeros(Q.shape[1])}

    def reduced(sc):
        w = state["w"].copy()
        zz = z + sc * v + Q @ w
        F = fun(zz)
        best = _max_abs(P.T @ F)
        for _ in range(20):
            if not np.isfinite(best):
                break
            try:
                w_new = w - np.linalg.solve(P.T @ jac(zz) @ Q, P.T @ F)
            except np.linalg.LinAlgError:
                break
            z_new = z + sc * v + Q @ w_new
            F_new = fun(z_new)
            r_new = _max_abs(P.T @ F_new)
            if not r_new < best:
                break
            converged = r_new < 1e-3 * tol or r_new > 0.5 * best
            w, zz, F, best = w_new, z_new, F_new, r_new
            if converged:
                break
        state["w"] = w
        return float(u @ F), zz, _max_abs(F)

    s0, s1 = 0.0, 1e-4
    g0, zb, rb = reduced(s0)
    g1, z1, r1 = reduced(s1)
    if r1 < rb:
        zb, rb = z1, r1
    for _ in range(maxit):
        if not (np.isfinite(g0) and np.isfinite(g1)) or g1 == g0:
            break
        s0, g0, s1 = s1, g1, s1 - g1 * (s1 - s0) / (g1 - g0)
        g1, z1, r1 = reduced(s1)
        if r1 < rb:
            improved = r1 < 0.5 * rb
            zb, rb = z1, r1
            if rb < tol and not improved:
                break
    return zb, rb


def _max_abs(F) -> float:
    return float(np.max(np.abs(F))) if np.all(np.isfinite(F)) else np.inf


def _equator_path_from_nodes(tau, nph, npp, N, T, horizon, M):
    m = N // M
    h = horizon / N
    phis = np.empty(N + 1); ps = np.empty(N + 1); Ss = np.empty(N + 1); rs = np.empty(N + 1)
    S0 = 0.0
    for j in range(M):
        out = _equator_rk4(np.array([j * m * h]), nph[j:j + 1], npp[j:j + 1], tau, T, h, m,
                           keep=True)
        sl = slice(j * m, (j + 1) * m + 1)
        phis[sl], ps[sl], rs[sl] = out["phis"][0], out["ps"][0], out["rs"][0]
        Ss[sl] = S0 + out["Ss"][0]
        S0 = Ss[(j + 1) * m]
    return phis, ps, Ss, rs


def _package_equator(tau, n, phis, ps, Ss, rs, res, N, T):
    if round((phis[-1] - phis[0]) / TWO_PI) != n:
        raise NoConvergence("equator shooting landed in another winding sector")
    times = np.linspace(0.0, T, N + 1)
    theta = np.full(N + 1, np.pi / 2)
    chi = -(phis - phis[0]) / 2.0
    bloch = np.stack([np.cos(phis), np.sin(phis), np.zeros_like(phis)], axis=-1)
    return BranchSolution(winding=n, Theta=np.pi / 2, tau=float(tau), times=times, theta=theta,
                          phi=phis, chi=chi, p_phi=ps, p_theta=np.zeros(N + 1), p_chi=0.0, r=rs,
                          action=float(Ss[-1]), converged=True, shooting_residual=float(res),
                          initial_momenta=(float(ps[0]), 0.0), bloch=bloch)


def _mirror_half(phis, ps, Ss, rs):
    """Extend a half-period non-winding solution to the full period.

    Shifting time by half a period and the relative angle by pi maps the
    reduced equations to themselves with the readout sign reversed, so the
    second half repeats the azimuth and momentum of the first.
    """
    return (np.concatenate([phis, phis[1:]]), np.concatenate([ps, ps[1:]]),
            np.concatenate([Ss, Ss[-1] + Ss[1:]]), np.concatenate([rs, -rs[1:]]))


def _guess_arrays(path_guess, N, horizon, tau):
    grid = np.linspace(0.0, horizon, N + 1)
    phis = np.interp(grid, path_guess.times, path_guess.phi - path_guess.phi[0])
    ps = np.interp(grid, path_guess.times, path_guess.p_phi)
    return phis - np.arctan(TWO_PI * tau), ps


def solve_equator(tau: float, n: int, p_guess: float | None = None, N: int = 2000,
                  T: float = 1.0, path_guess: BranchSolution | None = None,
                  segments: int = 20, fallback: bool = True) -> BranchSolution:
    """Extremal equator loop from the equilibrium azimuth with winding ``n``.

    The single unknown is the initial azimuthal momentum.  The non-winding
    loop is symmetric under a half-period shift, so only the first half is
    shot (its end must return to the starting azimuth); this removes the
    nearly free relative timing of its two fast segments at strong
    measurement.  When plain shooting fails, multiple shooting starts from
    ``path_guess`` (or from the exact loop for ``n = 1``); with
    ``fallback=False`` a failed plain shot raises instead.
    """
    if N % 2:
        raise ValueError("N must be even")
    if p_guess is None:
        p_guess = TWO_PI * tau if n == 1 else -0.25
    half = n == 0
    Nh, horizon, shift = (N // 2, T / 2, 0.0) if half else (N, T, TWO_PI * n)
    res = np.inf
    if path_guess is None:
        p, r_, ok = _equator_newton(tau, shift, p_guess, Nh, T, horizon)
        if ok[0]:
            out = equator_flow(p, tau, Nh, T, keep=True, horizon=horizon)
            arrays = out["phis"][0], out["ps"][0], out["Ss"][0], out["rs"][0]
            res = float(r_[0])
        elif not fallback:
            raise NoConvergence(f"equator shooting residual {float(r_[0]):.3e}")
        else:
            path_guess = _equator_guess_path(tau, n, float(p_guess), N, T)
    if path_guess is not None:
        while Nh % segments:
            segments -= 1
        phis, ps = _guess_arrays(path_guess, Nh, horizon, tau)
        nph, npp, res, ok = _equator_multiple_shoot(tau, shift, phis, ps, Nh, T, horizon, segments)
        if not ok:
            raise NoConvergence(f"equator multiple shooting residual {res:.3e}")
        arrays = _equator_path_from_nodes(tau, nph, npp, Nh, T, horizon, segments)
    if half:
        phis, ps, Ss, rs = arrays
        # the mismatch is pure discretization error (fourth order in the step)
        if abs(ps[-1] - ps[0]) > 1e-3 * max(1.0, abs(ps[0])):
            raise NoConvergence("half-period solution is not symmetric")
        arrays = _mirror_half(phis, ps, Ss, rs)
    return _package_equator(tau, n, *arrays, res, N, T)


def _equator_guess_path(tau, n, p0, N, T):
    """Guess path for multiple shooting when no neighbouring solution exists.

    The winding branch uses the exact equilibrium loop; otherwise the
    forward flow from ``p0`` is used as far as it stays finite.
    """
    times = np.linspace(0.0, T, N + 1)
    phi_e = -np.arctan(TWO_PI * tau)
    if n == 1:
        phis = phi_e + TWO_PI * times / T
        ps = np.full(N + 1, TWO_PI * tau)
    else:
        out = equator_flow(np.array([p0]), tau, N, T, keep=True)
        phis, ps = out["phis"][0], out["ps"][0]
        bad = ~np.isfinite(phis) | ~np.isfinite(ps) | (np.abs(ps) > 1e3)
        if bad.any():
            first = int(np.argmax(bad))
            phis[first:] = phis[max(first - 1, 0)]
            ps[first:] = ps[max(first - 1, 0)]
    return BranchSolution(n, np.pi / 2, tau, times, np.full(N + 1, np.pi / 2), phis, -phis / 2,
                          ps, np.zeros(N + 1), 0.0, np.zeros(N + 1), 0.0, False, np.inf, (p0, 0.0))


def _extrapolated_path(s1: BranchSolution, s2: BranchSolution, tau: float) -> BranchSolution:
    """Linear extrapolation in tau of two neighbouring equator solutions."""
    w = (tau - s2.tau) / (s2.tau - s1.tau)
    phi = s2.phi + w * ((s2.phi - s2.phi[0]) - (s1.phi - s1.phi[0]))
    p = s2.p_phi + w * (s2.p_phi - s1.p_phi)
    return replace(s2, tau=float(tau), phi=phi, p_phi=p, converged=False)


def equator_nonwinding_branch(taus, N: int = 2000, T: float = 1.0, p_start: float = -0.17,
                              max_step: float = 0.01, min_step: float = 1e-4):
    """Non-winding equator branch continued from weak to strong measurement.

    ``taus`` are visited from largest to smallest so every solve starts from
    its weak-measurement neighbour.  Between requested values the step in
    tau adapts: it halves on failure and grows after successes.  Plain
    shooting with a secant momentum guess is tried first; multiple shooting
    from the extrapolated neighbouring paths is the fallback.  Returns
    solutions in the input order.
    """
    taus = np.asarray(taus, float)
    out = [None] * len(taus)
    for i, sol in _iter_nonwinding_branch(taus, N, T, p_start, max_step, min_step):
        out[i] = sol
    return out


def _iter_nonwinding_branch(taus, N, T, p_start, max_step, min_step):
    """Yield ``(index, solution)`` for ``taus`` in decreasing order."""
    order = np.argsort(-taus, kind="stable")
    hist: list[BranchSolution] = []

    def attempt(tau):
        guess = p_start if not hist else hist[-1].initial_momenta[0]
        if len(hist) >= 2:
            s1, s2 = hist[-2], hist[-1]
            guess += (s2.initial_momenta[0] - s1.initial_momenta[0]) * (tau - s2.tau) / (s2.tau - s1.tau)
        try:
            return solve_equator(tau, 0, guess, N, T, fallback=not hist)
        except (NoConvergence, SingularJacobian):
            if not hist:
                raise
        path = _extrapolated_path(hist[-2], hist[-1], tau) if len(hist) >= 2 else hist[-1]
        return solve_equator(tau, 0, guess, N, T, path_guess=path)

    step = max_step
    for i in order:
        target = float(taus[i])
        while not hist or hist[-1].tau > target:
            cur = hist[-1].tau if hist else target
            tau = max(target, cur - step) if hist else target
            try:
                sol = attempt(tau)
            except (NoConvergence, SingularJacobian):
                step /= 2
                if not hist or step < min_step:
                    raise NoConvergence(f"non-winding branch lost near tau={tau:.6g}")
                continue
            hist.append(sol)
            step = min(max_step, 1.5 * step)
        yield i, hist[-1]


# ---------------------------------------------------------------------------
# closed forms and the winding-one family


def chi_n1_closed(Theta, tau):
    """Phase of the equilibrium loop, minus half its enclosed solid angle."""
    theta_e, _ = equilibrium_angles(Theta, tau)
    return -TWO_PI * np.sin(theta_e / 2) ** 2


def p_n1_closed(Theta, tau, T: float = 1.0):
    """Path density of the equilibrium loop."""
    return np.exp(closed_loop_action_rate(Theta, tau) * T)


def equilibrium_branch(Theta: float, tau: float, N: int = 1000, T: float = 1.0,
                       refine: bool = True) -> BranchSolution:
    """Winding-one extremal through the equilibrium point.

    Off the equator this loop is an extremal only with a nonzero conserved
    phase momentum, the value that makes the equilibrium point a
    co-rotating fixed point.  With ``refine`` the exact momenta are polished
    by shooting; otherwise they are used as they are.
    """
    theta_e, phi_e = equilibrium_angles(Theta, tau)
    p_phi, p_theta, p_chi = equilibrium_momenta(Theta, tau, T)
    pr = MeasurementProtocol(Theta, tau, T, N)
    bc = BoundaryCondition(theta_e, phi_e, winding=1, p_chi=p_chi)
    if refine:
        return solve_bvp(pr, bc, (p_phi, p_theta))
    probs = _problems_from_bc([pr], [bc])
    u = np.array([[p_phi, p_theta]])
    F, _ = probs.shoot(u)
    res = np.max(np.abs(F), axis=1)
    return _solution_from_shot(probs, u, res, res < SHOOTING_TOL, 1)[0]


# ---------------------------------------------------------------------------
# continuation


def track_branch(protocols, bcs, seed_solution: BranchSolution, min_step: float = 1e-3,
                 max_halvings: int = 6) -> list[BranchSolution]:
    """Natural continuation of one branch through a sequence of problems.

    ``protocols`` and ``bcs`` list the scanned parameter values in order.
    Each solve starts from the previous solution; on failure intermediate
    problems are not available, so the previous momenta are linearly
    extrapolated with shrinking steps before giving up with ``BranchLost``.
    """
    if not seed_solution.converged:
        raise ValueError("seed solution must be converged")
    out = []
    hist = [np.array(seed_solution.initial_momenta)]
    prev = seed_solution
    for pr, bc in zip(protocols, bcs):
        guesses = [hist[-1]]
        if len(hist) >= 2:
            guesses.insert(0, 2 * hist[-1] - hist[-2])
        sol = None
        for g in guesses:
            try:
                s = solve_bvp(pr, bc, g)
            except (NoConvergence, SingularJacobian, SingularCoordinate):
                continue
            sol = s
            break
        if sol is None:
            frac = 1.0
            for _ in range(max_halvings):
                frac /= 2
                if frac < min_step:
                    break
                g = hist[-1] + frac * (hist[-1] - hist[-2]) if len(hist) >= 2 else hist[-1]
                try:
                    sol = solve_bvp(pr, bc, g)
                    break
                except (NoConvergence, SingularJacobian, SingularCoordinate):
                    continue
        if sol is None:
            raise BranchLost("continuation failed", last_good=prev)
        out.append(sol)
        hist.append(np.array(sol.initial_momenta))
        prev = sol
    return out


# ---------------------------------------------------------------------------
# optimum phase and transitions


@dataclass(frozen=True)
class OptimalPhase:
    chi: float
    winning_branch: int
    action_n0: float | None
    action_n1: float
    degenerate: bool = False


def optimal_geometric_phase(Theta: float, tau: float, N: int = 400, T: float = 1.0,
                            n_theta: int = 128) -> OptimalPhase:
    """Phase of the more probable of the two competing self-closing branches.

    The winding branch is the equilibrium loop, known in closed form.  The
    non-winding branch comes from the latitude scan on an ``n_theta`` grid
    with ``Theta`` merged in.  Where it does not exist the winding branch
    wins by default.  Southern latitudes follow by mirror symmetry.
    """
    S1 = float(closed_loop_action_rate(Theta, tau) * T)
    chi1 = float(chi_n1_closed(Theta, tau))
    mirror = Theta > np.pi / 2
    Th = np.pi - Theta if mirror else Theta
    if abs(Th - np.pi / 2) < 1e-12:
        grid = np.array([np.pi / 2])
    else:
        grid = np.unique(np.concatenate([default_theta_grid(n_theta), [Th]]))[::-1]
    S0, chi0, _ = _scan_batch([tau], grid, N, T)
    j = int(np.argmin(np.abs(grid - Th)))
    if not np.isfinite(S0[0, j]):
        return OptimalPhase(chi1, 1, None, S1)
    S0j = float(S0[0, j])
    chi0j = -float(chi0[0, j]) if mirror else float(chi0[0, j])
    if abs(S0j - S1) < 1e-12:
        return OptimalPhase(chi0j, 0, S0j, S1, degenerate=True)
    if S0j > S1:
        return OptimalPhase(chi0j, 0, S0j, S1)
    return OptimalPhase(chi1, 1, S0j, S1)


def action_gap_equator(tau, n0_guess=None, N: int = 2000, T: float = 1.0):
    """``S(n=1) - S(n=0)`` on the equator, positive when winding wins."""
    sol = solve_equator(tau, 0, n0_guess, N, T)
    return -2 * np.pi ** 2 * tau * T - sol.action, sol


def find_tau_c_equator(window=(0.02, 0.5), n_scan: int = 25, N: int = 2000,
                       T: float = 1.0, xtol: float = 1e-12, max_step: float = 0.03) -> float:
    """Measurement strength where the optimal equator phase jumps.

    Walks the non-winding branch down from weak measurement over ``n_scan``
    points, stops at the first sign change of the action gap between the
    two equator branches and refines it with Brent's method.
    """
    taus = np.linspace(window[0], window[1], n_scan)
    prev = None
    for i, sol in _iter_nonwinding_branch(taus, N, T, -0.17, max_step, 1e-4):
        gap = -2 * np.pi ** 2 * taus[i] * T - sol.action
        if prev is not None and np.sign(gap) != np.sign(prev[1]):
            break
        prev = (sol, gap)
    else:
        raise NoBracket("no sign change of the action gap in the scan window")
    guess = {"p": sol.initial_momenta[0]}

    def g(tau):
        sol = solve_equator(tau, 0, guess["p"], N, T)
        guess["p"] = sol.initial_momenta[0]
        return -2 * np.pi ** 2 * tau * T - sol.action

    return float(brentq(g, taus[i], taus[i + 1], xtol=xtol))


@dataclass
class ThetaJumpScan:
    tau: float
    Thetas: np.ndarray
    chi_opt: np.ndarray
    winner: np.ndarray
    action_n0: np.ndarray
    action_n1: np.ndarray
    chi_n0: np.ndarray
    chi_n1: np.ndarray
    theta_jumps: list[float]
    merged: bool
    merge_theta: float | None


def detect_jumps(Thetas, chi, factor: float = JUMP_FACTOR):
    """Indices ``i`` where ``chi`` jumps between ``Thetas[i]`` and ``Thetas[i+1]``.

    A step counts as a jump when it exceeds ``factor`` times the median
    absolute step among its neighbours.
    """
    d = np.abs(np.diff(np.asarray(chi, float)))
    jumps = []
    for i in range(len(d)):
        nb = np.concatenate([d[max(0, i - 4):i], d[i + 1:i + 5]])
        scale = np.median(nb) if len(nb) else 0.0
        if d[i] > factor * max(scale, 1e-6):
            jumps.append(i)
    return jumps


SEED_THETA = 1.45
SEED_P_PHI = np.linspace(-4.0, 4.0, 41)
SEED_P_THETA = np.linspace(-8.0, 8.0, 41)


def _closed_problems(Thetas, taus, N, T):
    prs, bcs = [], []
    for Theta, tau in zip(Thetas, taus):
        th_e, ph_e = equilibrium_angles(Theta, tau)
        prs.append(MeasurementProtocol(float(Theta), float(tau), T, N))
        bcs.append(BoundaryCondition(float(th_e), float(ph_e), winding=0))
    return _problems_from_bc(prs, bcs), bcs


def _seed_nonwinding(Theta, taus, N, T, n_best=12):
    """Non-winding extremals at one latitude found from a momentum grid.

    Every grid point is shot once; the ``n_best`` smallest residuals per
    strength are polished by Newton.  Returns, per strength, the distinct
    converged initial momenta.
    """
    P, Q = np.meshgrid(SEED_P_PHI, SEED_P_THETA, indexing="ij")
    U = np.stack([P.ravel(), Q.ravel()], axis=-1)
    G = len(U)
    probs, _ = _closed_problems(np.full(G * len(taus), Theta), np.repeat(taus, G), N, T)
    F, _ = probs.shoot(np.tile(U, (len(taus), 1)))
    r = np.max(np.abs(F), axis=1).reshape(len(taus), G)
    r = np.where(np.isfinite(r), r, np.inf)
    cand = np.argsort(r, axis=1)[:, :n_best]
    owner = np.repeat(np.arange(len(taus)), n_best)
    sub, _ = _closed_problems(np.full(len(owner), Theta), np.asarray(taus)[owner], N, T)
    u, _, ok = _newton_batch(sub, U[cand.ravel()])
    _, out = sub.shoot(u)
    winds = np.round(out["dphi"] / TWO_PI)
    roots = [[] for _ in taus]
    for k in np.flatnonzero(ok & (winds == 0)):
        lst = roots[owner[k]]
        if all(np.max(np.abs(u[k] - v)) > 1e-6 * (1 + np.max(np.abs(v))) for v in lst):
            lst.append(u[k])
    return roots


def _continue_families(Thetas, taus, u0, N, T):
    """Natural continuation of a batch of non-winding families in latitude.

    ``taus`` and ``u0`` give each family's strength and momenta at the
    latitude preceding ``Thetas[0]``.  A family is dropped as soon as Newton
    fails or the path leaves the non-winding sector.  Returns actions,
    phases and the distance to the winding loop, NaN where lost.
    """
    F_ = len(taus)
    u = np.array(u0, float).reshape(F_, 2)
    u_prev = None
    alive = np.ones(F_, bool)
    shape = (F_, len(Thetas))
    S, chi, dist = np.full(shape, np.nan), np.full(shape, np.nan), np.full(shape, np.nan)
    for j, Theta in enumerate(Thetas):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        probs, bcs = _closed_problems(np.full(len(idx), Theta), taus[idx], N, T)
        guess = u[idx] if u_prev is None else 2 * u[idx] - u_prev[idx]
        ug, res, ok = _newton_batch(probs, guess)
        if not ok.all():
            u2, res2, ok2 = _newton_batch(probs, u[idx])
            better = ok2 & ~ok
            ug[better], res[better], ok[better] = u2[better], res2[better], True
        sols = _solution_from_shot(probs, ug, res, ok, 0)
        new_prev = u.copy()
        for k, i in enumerate(idx):
            s = sols[k]
            if not ok[k] or round((s.phi[-1] - s.phi[0]) / TWO_PI) != 0:
                alive[i] = False
                continue
            S[i, j] = s.action
            chi[i, j] = s.geometric_phase
            th0 = bcs[k].theta0
            loop = np.stack([np.sin(th0) * np.cos(s.phi[0] + TWO_PI * s.times),
                             np.sin(th0) * np.sin(s.phi[0] + TWO_PI * s.times),
                             np.full_like(s.times, np.cos(th0))], axis=-1)
            dist[i, j] = float(np.max(np.linalg.norm(s.bloch - loop, axis=-1)))
            u[i] = ug[k]
        u_prev = new_prev
    return S, chi, dist


def _scan_batch(taus, Thetas, N, T):
    """Most probable non-winding extremal across latitudes for several strengths.

    Off the equator the non-winding extremals are not continuations of the
    equator loop: the latitude momentum needed to steer diverges as the
    axis approaches the equator.  All non-winding roots are therefore found
    at one interior seed latitude and each is continued toward both ends of
    the grid; at every latitude the largest surviving action is kept.  A
    latitude exactly on the equator is solved with the reduced equator
    problem.
    """
    taus = np.asarray(taus, float)
    Thetas = np.asarray(Thetas, float)
    K, L = len(taus), len(Thetas)
    S0 = np.full((K, L), np.nan)
    chi0 = np.full((K, L), np.nan)
    dist = np.full((K, L), np.nan)
    on_eq = np.abs(Thetas - np.pi / 2) < 1e-12
    for j in np.flatnonzero(on_eq):
        for i, tau in enumerate(taus):
            try:
                sol = solve_equator(float(tau), 0, None, 2000, T)
            except (NoConvergence, SingularJacobian):
                continue
            S0[i, j], chi0[i, j], dist[i, j] = sol.action, sol.geometric_phase, np.inf
    off = np.flatnonzero(~on_eq)
    if len(off) == 0:
        return S0, chi0, dist
    off = off[np.argsort(Thetas[off])]
    s = int(np.argmin(np.abs(Thetas[off] - SEED_THETA)))
    roots = _seed_nonwinding(Thetas[off[s]], taus, N, T)
    fam_tau = np.array([i for i, rs in enumerate(roots) for _ in rs], int)
    if len(fam_tau) == 0:
        return S0, chi0, dist
    fam_u = np.array([u for rs in roots for u in rs])
    for part in (off[s:], off[:s + 1][::-1]):
        S, chi, d = _continue_families(Thetas[part], taus[fam_tau], fam_u, N, T)
        for i in range(K):
            rows = np.flatnonzero(fam_tau == i)
            if len(rows) == 0:
                continue
            Si = S[rows]
            has = np.isfinite(Si).any(axis=0)
            best = np.argmax(np.where(np.isfinite(Si), Si, -np.inf), axis=0)
            cols = np.flatnonzero(has)
            S0[i, part[cols]] = Si[best[cols], cols]
            chi0[i, part[cols]] = chi[rows][best[cols], cols]
            dist[i, part[cols]] = d[rows][best[cols], cols]
    return S0, chi0, dist


def _assemble_scan(tau, Thetas, S0, chi0, dist, T, factor):
    S1 = np.array([closed_loop_action_rate(Th, tau) * T for Th in Thetas])
    chi1 = np.array([chi_n1_closed(Th, tau) for Th in Thetas])
    has0 = np.isfinite(S0)
    win0 = has0 & (S0 > S1)
    chi = np.where(win0, chi0, chi1)
    merged_mask = has0 & (dist < MERGE_TOL)
    lost = ~has0
    merged = bool(merged_mask.any() or lost.any())
    merge_theta = None
    if merged:
        first = np.flatnonzero(merged_mask | lost)[0]
        merge_theta = float(Thetas[first])
    order = np.argsort(Thetas)
    jumps = [float(0.5 * (Thetas[order][i] + Thetas[order][i + 1]))
             for i in detect_jumps(Thetas[order], chi[order], factor)]
    return ThetaJumpScan(float(tau), Thetas, chi, np.where(win0, 0, 1), S0, S1, chi0, chi1, jumps,
                         merged, merge_theta)


def default_theta_grid(n: int = 128, eps: float = 1e-3):
    """Latitudes from the equator down to ``eps`` above the north pole."""
    return np.linspace(np.pi / 2, eps, n)


def scan_theta_jump(tau: float, Thetas=None, N: int = 400, T: float = 1.0,
                    factor: float = JUMP_FACTOR) -> ThetaJumpScan:
    """Optimal phase across latitudes at one strength and its jump locations.

    Only the northern half is scanned; the southern half follows by mirror
    symmetry.  ``merged`` reports that the non-winding branch merged into
    the winding one (or ceased to exist) before the north pole.
    """
    Thetas = default_theta_grid() if Thetas is None else np.asarray(Thetas, float)
    S0, chi0, dist = _scan_batch([tau], Thetas, N, T)
    return _assemble_scan(tau, Thetas, S0[0], chi0[0], dist[0], T, factor)


def scan_theta_jumps(taus, Thetas=None, N: int = 400, T: float = 1.0,
                     factor: float = JUMP_FACTOR) -> list[ThetaJumpScan]:
    Thetas = default_theta_grid() if Thetas is None else np.asarray(Thetas, float)
    S0, chi0, dist = _scan_batch(taus, Thetas, N, T)
    return [_assemble_scan(t, Thetas, S0[i], chi0[i], dist[i], T, factor)
            for i, t in enumerate(taus)]


def find_Theta_C(taus=None, Thetas=None, N: int = 400, T: float = 1.0):
    """Smallest latitude at which the optimal phase still jumps.

    Below it the optimal phase is continuous in latitude for every scanned
    strength.  Returns the value and the per-strength scans.
    """
    taus = np.linspace(0.10, 0.20, 11) if taus is None else np.asarray(taus, float)
    scans = scan_theta_jumps(taus, Thetas, N, T)
    found = [j for s in scans for j in s.theta_jumps]
    if not found:
        raise NoBracket("no latitude jump in the scanned strengths")
    return float(min(found)), scans
