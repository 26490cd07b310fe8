"""Command-line front end: ``kdlab <subcommand> --config run.json --out dir``.

Subcommands: background, angular, evolve, superpose, rage, estimate, deficiency.
Scalar results are CSV (header row, ``%.17g`` floats); each run writes a
``manifest.json`` listing every file it produced.  Exit codes: 0 success,
1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from kdlab import __version__
from kdlab.config import ConfigError, RunConfig, load_config
from kdlab.errors import ConvergenceError, DomainError, ParameterError

log = logging.getLogger("kdlab")

SUBCOMMANDS = ("background", "angular", "evolve", "superpose", "rage", "estimate", "deficiency")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    out_dir: Path
    code_version: str = __version__
    seed: int = 0
    started: float = field(default_factory=time.time)
    finished: float | None = None
    files: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    defaults_applied: list = field(default_factory=list)
    env_overrides: list = field(default_factory=list)
    partial: bool = False
    summary: dict = field(default_factory=dict)

    def add(self, path: Path) -> Path:
        rel = str(Path(path).relative_to(self.out_dir))
        if rel in self.files:
            raise RuntimeError(f"artifact {rel} emitted twice")
        self.files.append(rel)
        return path

    def write(self) -> Path:
        self.finished = time.time()
        path = self.out_dir / "manifest.json"
        self.add(path)
        body = {
            "subcommand": self.subcommand,
            "config_hash": self.config_hash,
            "code_version": self.code_version,
            "seed": self.seed,
            "wall_clock": {"started": self.started, "finished": self.finished,
                           "elapsed_s": self.finished - self.started},
            "files": self.files,
            "warnings": self.warnings,
            "defaults_applied": self.defaults_applied,
            "env_overrides": self.env_overrides,
            "partial": self.partial,
            "summary": self.summary,
        }
        path.write_text(json.dumps(body, indent=2, default=_json_default) + "\n")
        return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def write_csv(man: RunManifest, name: str, header, rows) -> Path:
    path = man.out_dir / name
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return man.add(path)


# ---------------------------------------------------------------------------
# builders


def build_grid(cfg: RunConfig):
    from kdlab.operators import Grid2D

    g = cfg["grid"]
    return Grid2D(cfg.black_hole(), X=g["X"], n_x=g["n_x"], n_theta=g["n_theta"])


def build_initial(cfg: RunConfig):
    from kdlab.evolution import InitialData

    ini = cfg["initial"]
    return InitialData(kind=ini["kind"], x0=ini["x0"], sigma=ini["sigma"], k0=ini["k0"],
                       theta0=ini["theta0"], theta_width=ini["theta_width"], m=int(ini["m"]),
                       polarization=cfg.polarization())


def build_evolution(cfg: RunConfig):
    from kdlab.evolution import EvolutionConfig

    e = cfg["evolution"]
    return EvolutionConfig(dt=e["dt"], t_final=e["t_final"], snapshot_stride=int(e["snapshot_stride"]),
                           boundary_mass_threshold=e["boundary_mass_threshold"],
                           solver_tol=e["solver_tol"], solver=e["solver"])


def build_operator(cfg: RunConfig, grid, kappa=None):
    from kdlab.operators import PartialWaveOperator

    p = cfg["particle"]
    return PartialWaveOperator(grid, p["kappa"] if kappa is None else kappa, p["mass"], cfg.potential())


# ---------------------------------------------------------------------------
# subcommands


def run_background(cfg: RunConfig, man: RunManifest, threads: int):
    from kdlab.background import tortoise

    bh = cfg.black_hole()
    an = cfg["analysis"]
    r = bh.r_plus + np.logspace(-3, np.log10(an["r_max"]), int(an["n_r"]))
    x = tortoise(bh, r)
    print(f"r_plus,{fmt(bh.r_plus)}")
    print(f"r_minus,{fmt(bh.r_minus)}")
    print("r,x")
    for ri, xi in zip(r, x):
        print(f"{fmt(ri)},{fmt(xi)}")
    write_csv(man, "horizons.csv", ["r_plus", "r_minus", "x_offset"], [(bh.r_plus, bh.r_minus, bh.x_offset)])
    write_csv(man, "background.csv", ["r", "x"], zip(r, x))


def run_angular(cfg: RunConfig, man: RunManifest, threads: int):
    from kdlab.angular import AngularGrid, eigenbasis

    grid = AngularGrid(int(cfg["grid"]["n_theta"]))
    m_max = int(cfg["grid"]["m_max"])
    kappas = sorted({k for k, _ in cfg.modes()} | {cfg["particle"]["kappa"]})
    rows = []
    for kappa in kappas:
        pairs = eigenbasis(kappa, grid, m_max)
        for p in pairs:
            rows.append((kappa, p.m, p.lam_formula, p.lam, abs(p.lam - p.lam_formula)))
            if cfg["analysis"]["dump_eigenfunctions"]:
                n = grid.n_theta
                write_csv(man, f"eigenfunction_kappa{kappa:+g}_m{p.m:+d}.csv", ["theta", "g1", "g2"],
                          zip(grid.nodes, p.g[:n], p.g[n:]))
    write_csv(man, "angular.csv", ["kappa", "m", "lambda_formula", "lambda_computed", "abs_err"], rows)
    man.summary["max_abs_err"] = max(r[-1] for r in rows)


def _trajectory_rows(traj):
    return zip(traj.times, traj.s_norm, traj.graph_norm, traj.boundary_mass[:, 0], traj.boundary_mass[:, 1])


def run_evolve(cfg: RunConfig, man: RunManifest, threads: int):
    from kdlab.evolution import check_conservation, evolve, save_trajectory, symmetric_run

    grid = build_grid(cfg)
    op = build_operator(cfg, grid)
    ecfg = build_evolution(cfg)
    init = build_initial(cfg)
    snap_dir = man.out_dir / "snapshots" if cfg["evolution"]["write_snapshots"] else None
    if cfg["evolution"]["symmetric"]:
        traj = symmetric_run(op, init, ecfg, snapshot_dir=snap_dir)
    else:
        traj = evolve(op, init, ecfg, snapshot_dir=snap_dir)
    for f in getattr(traj, "snapshot_files", []):
        man.add(f)
    write_csv(man, "evolve.csv", ["t", "s_norm", "graph_norm", "boundary_left", "boundary_right"],
              _trajectory_rows(traj))
    save_trajectory(man.out_dir / "trajectory.npz", traj)
    man.add(man.out_dir / "trajectory.npz")
    man.warnings.extend(traj.warnings)
    man.warnings.extend(check_conservation(traj, ecfg))
    man.summary.update(norm_drift=traj.norm_drift, graph_drift=traj.graph_drift,
                       contamination_time=traj.contamination_time,
                       mean_iterations=float(np.mean(traj.iterations)) if traj.iterations else 0.0)


def run_superpose(cfg: RunConfig, man: RunManifest, threads: int):
    from kdlab.evolution import InitialData, evolve_superposition

    grid = build_grid(cfg)
    init = build_initial(cfg)
    modes = [(k, c, init) for k, c in cfg.modes()]
    p = cfg["particle"]
    res = evolve_superposition(grid, modes, build_evolution(cfg), p["mass"], cfg.potential(), threads)
    expected = 2 * np.pi * (np.abs(res.coefficients) ** 2 * res.mode_norms**2).sum(axis=1)
    header = ["t", "combined_norm_sq", "expected", "parseval_error"] + [f"norm_kappa{k:+g}" for k in res.kappas]
    rows = [(t, c, e, err, *n) for t, c, e, err, n in
            zip(res.times, res.combined_norm_sq, expected, res.parseval_error, res.mode_norms)]
    write_csv(man, "superpose.csv", header, rows)
    man.summary["max_parseval_error"] = float(res.parseval_error.max())


def run_rage(cfg: RunConfig, man: RunManifest, threads: int):
    from kdlab.analysis import rage_from_trajectory
    from kdlab.evolution import EvolutionConfig, load_trajectory, symmetric_run

    grid = build_grid(cfg)
    an = cfg["analysis"]
    T_list = sorted(an["T_list"])
    if an["trajectory"] is not None:
        traj = load_trajectory(an["trajectory"], grid)
    else:
        base = build_evolution(cfg)
        ecfg = EvolutionConfig(dt=base.dt, t_final=max(T_list), snapshot_stride=base.snapshot_stride,
                               boundary_mass_threshold=base.boundary_mass_threshold,
                               solver_tol=base.solver_tol, track_graph_norm=False, solver=base.solver)
        traj = symmetric_run(build_operator(cfg, grid), build_initial(cfg), ecfg)
        man.warnings.extend(traj.warnings)
    rep = rage_from_trajectory(traj, an["R"], T_list, an["fraction"])
    write_csv(man, "rage.csv", ["T", "cesaro_mean", "valid"],
              zip(rep.series.T_list, rep.series.cesaro, rep.series.valid))
    man.warnings.extend(rep.warnings)
    man.summary.update(decreasing=rep.decreasing, final_fraction=rep.final_fraction,
                       below_threshold=rep.below_threshold, passed=rep.passed)


def run_estimate(cfg: RunConfig, man: RunManifest, threads: int):
    from kdlab.analysis import coefficient_constant, empirical_K, random_field_family, tail_report

    grid = build_grid(cfg)
    op = build_operator(cfg, grid)
    an = cfg["analysis"]
    m_max = min(4, int(cfg["grid"]["m_max"]))
    fields = random_field_family(grid, op.kappa, int(an["n_fields"]), cfg.seed, m_max)
    rep = empirical_K(op, fields)
    write_csv(man, "estimate.csv", ["sample_id", "lhs", "rhs", "ratio"],
              ((i, s.lhs, s.rhs, s.ratio) for i, s in enumerate(rep.samples)))
    coef = coefficient_constant(grid.bh, grid.X)
    R = an["R"]
    tails = random_field_family(grid, op.kappa, int(an["n_tail_fields"]), cfg.seed + 1, m_max,
                                x_range=0.2 * R)
    rows = []
    variations = []
    for i, f in enumerate(tails):
        tr = tail_report(f, op, R, an["L_list"], rep.K)
        variations.append(tr.variation)
        rows.extend((i, L, t, s, tr.bound) for L, t, s in zip(tr.L_list, tr.tails, tr.scaled))
    write_csv(man, "fourier_tail.csv", ["sample_id", "L", "tail", "tail_times_1pL", "bound"], rows)
    man.summary.update(K=rep.K, C=coef.C, C_left_limit=coef.left_limit,
                       quotient_decreasing_left=coef.decreasing_left,
                       quotient_decreasing_right=coef.decreasing_right,
                       max_tail_variation=max(variations))


def run_deficiency(cfg: RunConfig, man: RunManifest, threads: int):
    from kdlab.analysis import channel_grid, deficiency_check

    bh = cfg.black_hole()
    an = cfg["analysis"]
    ch = an["channels"]
    channels = channel_grid(ch["kappas"], ch["mus"], ch["signs"])

    def one(c):
        return deficiency_check(bh, c[0], int(c[1]), int(c[2]), an["x_shoot"])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, channels))
    else:
        results = [one(c) for c in channels]
    rows = [(r.kappa, r.mu, r.sign, r.matching_determinant.real, r.matching_determinant.imag, r.modulus)
            for r in results]
    write_csv(man, "deficiency.csv", ["kappa", "mu", "sign", "det_re", "det_im", "det_abs"], rows)
    man.summary["min_det_abs"] = min(r.modulus for r in results)


RUNNERS = {
    "background": run_background,
    "angular": run_angular,
    "evolve": run_evolve,
    "superpose": run_superpose,
    "rage": run_rage,
    "estimate": run_estimate,
    "deficiency": run_deficiency,
}


def run(subcommand: str, cfg: RunConfig, out_dir=None, threads: int = 1) -> RunManifest:
    """Execute one subcommand and write its manifest."""
    if subcommand not in RUNNERS:
        raise ParameterError(f"unknown subcommand {subcommand!r}")
    out = Path(out_dir if out_dir is not None else cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(subcommand, cfg.hash(), out, seed=cfg.seed,
                      defaults_applied=list(cfg.defaults_applied), env_overrides=list(cfg.env_overrides))
    try:
        RUNNERS[subcommand](cfg, man, threads)
    except Exception:
        man.partial = True
        man.write()
        raise
    man.write()
    return man


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kdlab", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON run configuration (defaults if omitted)")
    ap.add_argument("--out", help="output directory (overrides output.directory)")
    ap.add_argument("--seed", type=int, help="seed for randomized field families (overrides seed)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for independent subtasks")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads: must be at least 1")
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed: must be an unsigned 64-bit integer")
            cfg.data["seed"] = args.seed
        man = run(args.subcommand, cfg, args.out, args.threads)
    except (ConfigError, ParameterError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConvergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    for w in man.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
