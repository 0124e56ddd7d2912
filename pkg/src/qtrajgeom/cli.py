"""Command-line driver.

    qtrajgeom <simulate|optimal|transition|chern|corrections> --config FILE
              [--set k=v]... [--out DIR] [--threads N] [--seed N]

Each run writes its tables plus ``manifest.json`` (config echo, version,
timing, convergence) into the output directory.  The exit status is 0 only
when every requested grid point converged; failed points are listed in the
manifest and completed rows are still written.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corrections as corr
from . import optimal as opt
from . import topology as topo
from .bloch import BlochState, MeasurementProtocol, NullVariant
from .action import equilibrium_angles
from .config import COMMANDS, config_hash, load_config
from .errors import ConfigError, QTrajError
from .results import version_string, write_csv, write_json
from .trajectories import ratio_confidence_interval, run_ensemble, self_closing_counts

log = logging.getLogger("qtrajgeom")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


@dataclass
class ResultBundle:
    out_dir: Path
    cfg: dict
    cfg_hash: str
    files: list[str] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def csv(self, name, columns, rows):
        write_csv(self.out_dir / name, columns, rows, self.cfg_hash)
        self.files.append(name)

    def json(self, name, payload):
        write_json(self.out_dir / name, payload, self.cfg_hash)
        self.files.append(name)

    def fail(self, where: dict, exc: Exception):
        entry = dict(where, error=type(exc).__name__, message=str(exc))
        log.warning("grid point %s failed: %s", where, exc)
        self.failures.append(entry)


# ---------------------------------------------------------------------------
# commands


def _initial_state(cfg, tau):
    if cfg["init"] == "equilibrium":
        th, ph = equilibrium_angles(cfg["Theta"], tau)
        return BlochState(float(th), float(ph))
    return BlochState(float(cfg["init"]["theta"]), float(cfg["init"]["phi"]))


def cmd_simulate(cfg: dict, bundle: ResultBundle, threads: int = 1) -> None:
    variant = NullVariant(cfg["null_c"]) if cfg["variant"] == "null" else None
    traj_rows, ens_rows, stats = [], [], []
    for k, tau in enumerate(cfg["taus"]):
        kw = {} if variant is None else {"variant": variant}
        pr = MeasurementProtocol(cfg["Theta"], tau, cfg["T"], cfg["N"], **kw)
        init = _initial_state(cfg, tau)
        summ = run_ensemble(pr, init, cfg["n_traj"], cfg["seed"] + k, threads=threads,
                            keep_paths=cfg["keep_paths"])
        offset = k * cfg["n_traj"]
        for i in range(cfg["n_traj"]):
            tid = offset + i
            ens_rows.append((tid, summ.phi_final[i], summ.chi_final[i], summ.log_weight[i]))
            if cfg["keep_paths"]:
                rec = summ.records[i]
                cum = np.concatenate([[0.0], np.cumsum(rec.step_log_weights)])
                r = np.concatenate([rec.readouts, [np.nan]])
                for j in range(rec.times.size):
                    traj_rows.append((tid, j, rec.times[j], rec.theta[j], rec.phi[j], rec.chi[j],
                                      r[j], cum[j]))
        counts = self_closing_counts(summ, cfg["bin_width"])
        entry = {"tau": tau, "seed": cfg["seed"] + k, "traj_id_first": offset,
                 "traj_id_last": offset + cfg["n_traj"] - 1, "n_total": counts.n_total,
                 "n_winding": counts.n_winding, "n_nonwinding": counts.n_nonwinding,
                 "P_winding": counts.P_winding, "P_nonwinding": counts.P_nonwinding,
                 "R_empirical": None, "R_ci95": None, "R_upper95": None}
        lo, hi = ratio_confidence_interval(summ, cfg["bin_width"], 0.95, cfg["n_boot"],
                                           cfg["seed"] + k)
        if counts.n_nonwinding:
            entry["R_empirical"] = counts.R_empirical
        entry.update(R_ci95=[lo, hi], R_upper95=hi)
        stats.append(entry)
    if cfg["keep_paths"]:
        bundle.csv("trajectories.csv", ["traj_id", "step", "t", "theta", "phi_unwrapped", "chi",
                                        "r", "log_weight"], traj_rows)
    bundle.csv("ensemble.csv", ["traj_id", "phi_final", "chi_final", "log_weight"], ens_rows)
    bundle.json("summary.json", {"bin_width": cfg["bin_width"], "Theta": cfg["Theta"],
                                 "N": cfg["N"], "n_traj": cfg["n_traj"], "per_tau": stats})


def cmd_optimal(cfg: dict, bundle: ResultBundle, threads: int = 1) -> None:
    taus = cfg["taus"]
    Thetas = np.asarray(cfg["Thetas"], float)
    north = np.where(Thetas > np.pi / 2, np.pi - Thetas, Thetas)
    # continuation in latitude needs a fine grid; requested points are merged in
    grid = np.unique(np.concatenate([opt.default_theta_grid(cfg["scan_n_theta"]), north]))[::-1]
    branch_rows, chi_rows = [], []
    for tau in taus:
        try:
            scan = opt.scan_theta_jump(tau, grid, cfg["N"], cfg["T"])
        except QTrajError as exc:
            bundle.fail({"tau": tau}, exc)
            continue
        for Theta, Th in zip(Thetas, north):
            j = int(np.flatnonzero(np.isclose(grid, Th))[0])
            sgn = -1.0 if Theta > np.pi / 2 else 1.0
            S1, S0 = scan.action_n1[j], scan.action_n0[j]
            chi1 = float(opt.chi_n1_closed(Theta, tau))
            branch_rows.append(("winding", 1, Theta, tau, S1, np.exp(S1), chi1))
            if np.isfinite(S0):
                branch_rows.append(("nonwinding", 0, Theta, tau, S0, np.exp(S0),
                                    sgn * scan.chi_n0[j]))
                chi_opt = sgn * scan.chi_n0[j] if scan.winner[j] == 0 else chi1
            else:
                # below the merge latitude the branch does not exist; blank cells say so
                branch_rows.append(("nonwinding", 0, Theta, tau, None, None, None))
                chi_opt = chi1
            chi_rows.append((tau, Theta, chi_opt, 0 if np.isfinite(S0) and scan.winner[j] == 0 else 1))
    bundle.csv("branches.csv", ["branch", "n", "Theta", "tau", "action", "density", "chi"],
               branch_rows)
    bundle.csv("chi_of_Theta.csv", ["tau", "Theta", "chi", "winning_n"], chi_rows)


def cmd_transition(cfg: dict, bundle: ResultBundle, threads: int = 1) -> None:
    out = {}
    wanted = cfg["quantities"]
    jobs = {
        "tau_c_equator": lambda: opt.find_tau_c_equator(T=cfg["T"]),
        "tau_c_open": lambda: topo.open_transition_scan(
            "on_axis", "greedy", n_theta=cfg["open_n_theta"], N=cfg["open_N"], T=cfg["T"]).tau_c,
        "tau_c_equilibrium_open": lambda: topo.open_transition_scan(
            "equilibrium", "fixed", n_theta=cfg["open_n_theta"], N=cfg["open_N"],
            T=cfg["T"]).tau_c,
        "Theta_C": lambda: opt.find_Theta_C(
            cfg["theta_c_taus"], opt.default_theta_grid(cfg["theta_c_n_theta"]),
            cfg["theta_c_N"], cfg["T"])[0],
        "tau_c_eff": lambda: corr.find_tau_c_eff(n_scan=cfg["eff_n_scan"], T=cfg["T"]),
    }
    for key in ("tau_c_equator", "tau_c_open", "tau_c_equilibrium_open", "Theta_C", "tau_c_eff"):
        if key not in wanted:
            continue
        try:
            out[key] = float(jobs[key]())
        except QTrajError as exc:
            out[key] = None
            bundle.fail({"quantity": key}, exc)
    bundle.json("transitions.json", out)


def cmd_chern(cfg: dict, bundle: ResultBundle, threads: int = 1) -> None:
    chern_rows, chi_rows = [], []
    for tau in cfg["taus"]:
        fam = topo.build_family(tau, cfg["init_rule"], cfg["record_rule"], cfg["n_theta"],
                                cfg["N"], cfg["T"])
        for Th, chi in zip(fam.Theta_grid, fam.chi_g):
            chi_rows.append((tau, Th, chi))
        row = [tau, None, None, None, None, None]
        try:
            rep = topo.chern_number(fam)
            row[1:4] = rep.C_curvature, rep.C_boundary, rep.mismatch
        except QTrajError as exc:
            if getattr(exc, "report", None) is not None:
                rep = exc.report
                row[1:4] = rep.C_curvature, rep.C_boundary, rep.mismatch
            bundle.fail({"tau": tau, "quantity": "chern"}, exc)
        try:
            row[4] = topo.family_winding(fam)
        except QTrajError as exc:
            bundle.fail({"tau": tau, "quantity": "winding"}, exc)
        row[5] = topo.coverage_gap(fam)
        chern_rows.append(tuple(row))
    bundle.csv("chern.csv", ["tau", "C_curvature", "C_boundary", "mismatch", "winding",
                             "coverage_gap"], chern_rows)
    bundle.csv("chi_of_Theta.csv", ["tau", "Theta", "chi"], chi_rows)


def cmd_corrections(cfg: dict, bundle: ResultBundle, threads: int = 1) -> None:
    cache = corr.NonwindingCache(cfg["N"], cfg["T"])
    rows = []
    try:
        cache.populate(cfg["taus"])
    except QTrajError as exc:
        bundle.fail({"stage": "nonwinding continuation"}, exc)
    for k, tau in enumerate(cfg["taus"]):
        R_emp = None
        if cfg["empirical"]:
            th, ph = equilibrium_angles(np.pi / 2, tau)
            pr = MeasurementProtocol(np.pi / 2, tau, cfg["T"], cfg["mc_N"])
            summ = run_ensemble(pr, BlochState(float(th), float(ph)), cfg["mc_n_traj"],
                                cfg["seed"] + k, threads=threads)
            counts = self_closing_counts(summ, cfg["bin_width"])
            if counts.n_nonwinding:
                R_emp = counts.R_empirical
            else:
                bundle.fail({"tau": tau, "quantity": "R_empirical"},
                            QTrajError("no non-winding trajectories in the bin"))
        try:
            rep = corr.corrected_transition_ratio(tau, cache, cfg["N"], cfg["T"])
            rows.append((tau, rep.R_saddle, rep.R, R_emp))
        except QTrajError as exc:
            bundle.fail({"tau": tau, "quantity": "R_corrected"}, exc)
    bundle.csv("ratio.csv", ["tau", "R_saddle", "R_corrected", "R_empirical"], rows)


HANDLERS = {"simulate": cmd_simulate, "optimal": cmd_optimal, "transition": cmd_transition,
            "chern": cmd_chern, "corrections": cmd_corrections}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qtrajgeom", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON config file (defaults are used when omitted)")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                    help="override a config key; dotted keys reach nested objects")
    ap.add_argument("--out", help="output directory (default: $QTRAJGEOM_OUT or ./qtrajgeom_out)")
    ap.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config(args.command, args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(args.out or os.environ.get("QTRAJGEOM_OUT") or "qtrajgeom_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = ResultBundle(out_dir, cfg, config_hash(cfg))
    t0 = time.time()
    try:
        HANDLERS[args.command](cfg, bundle, threads=max(1, args.threads))
    except QTrajError as exc:
        bundle.fail({"command": args.command}, exc)
    manifest = {"config": cfg, "version": version_string(), "command": args.command,
                "started_unix": t0, "wall_seconds": time.time() - t0,
                "files": bundle.files, "converged": not bundle.failures,
                "failures": bundle.failures}
    write_json(out_dir / "manifest.json", manifest, bundle.cfg_hash)
    return EXIT_OK if not bundle.failures else EXIT_PARTIAL


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
