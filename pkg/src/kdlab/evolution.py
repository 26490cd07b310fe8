"""Crank-Nicolson evolution U(t) = exp(-i t S^-1 H) for one partial wave.

Each step solves

    (S + i dt/2 H) psi_{n+1} = (S - i dt/2 H) psi_n,

the Cayley transform of the S-symmetric generator, so the discrete S-norm
and the S-norm of S^-1 H psi are conserved up to the linear-solver residual.
"""

from __future__ import annotations

import logging
import queue
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from kdlab import _kernels
from kdlab.angular import check_half_integer, eigenbasis
from kdlab.errors import ConvergenceError, ParameterError
from kdlab.operators import Grid2D, PartialWaveOperator, s_norm

log = logging.getLogger(__name__)

DIRECT_MAX_UNKNOWNS = 40_000
BOUNDARY_ZONE = 0.05


@dataclass(frozen=True)
class EvolutionConfig:
    dt: float = 0.05
    t_final: float = 10.0
    snapshot_stride: int = 10
    boundary_mass_threshold: float = 1e-3
    solver_tol: float = 1e-13
    track_graph_norm: bool = True
    solver: str = "auto"

    def __post_init__(self):
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if not self.t_final >= 0:
            raise ParameterError(f"t_final must be non-negative, got {self.t_final}")
        if not 0 < self.solver_tol < 1e-8:
            raise ParameterError(f"solver_tol must lie in (0, 1e-8), got {self.solver_tol}")
        if int(self.snapshot_stride) < 1:
            raise ParameterError("snapshot_stride must be at least 1")
        if not self.boundary_mass_threshold > 0:
            raise ParameterError("boundary_mass_threshold must be positive")
        if self.solver not in ("auto", "fixed_point", "gmres", "direct"):
            raise ParameterError(f"unknown solver {self.solver!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


def generator_norm_bound(op: PartialWaveOperator) -> float:
    """Upper bound for ||S^-1 H|| in the S-product (triangle inequality)."""
    g = op.grid
    theta_part = 1.0 / g.h_theta + abs(op.kappa) / np.sin(g.theta.nodes[0])
    h_bound = 1.0 / g.h_x + float(op.f.max()) * theta_part + op.h2_norm_max()
    lo, _ = op.weight.spectrum_bounds()
    return h_bound / lo


class CrankNicolson:
    """Cayley-transform stepper with a selectable linear solver.

    ``fixed_point`` iterates y <- b - i tau S^-1 H y, which contracts in the
    S-norm with factor tau ||S^-1 H||; ``gmres`` is used when that factor is
    not small; ``direct`` factorises S + i tau H once (small grids only).
    """

    def __init__(self, op: PartialWaveOperator, dt: float, solver_tol: float = 1e-13,
                 method: str = "auto", max_iter: int = 500):
        if dt == 0:
            raise ParameterError("dt must be nonzero")
        self.op = op
        self.dt = float(dt)
        self.tau = 0.5 * self.dt
        self.tol = float(solver_tol)
        self.max_iter = int(max_iter)
        self.rho = generator_norm_bound(op)
        self.iterations: list[int] = []
        size = op.grid.size
        if method == "auto":
            if size <= DIRECT_MAX_UNKNOWNS:
                method = "direct"
            elif abs(self.tau) * self.rho < 0.9:
                method = "fixed_point"
            else:
                method = "gmres"
        self.method = method
        self._lu = None
        if method == "direct":
            H = op.sparse("H")
            S = op.weight.sparse()
            self._lu = spla.splu(sp.csc_matrix(S + 1j * self.tau * H))
            self._rhs_mat = (S - 1j * self.tau * H).tocsr()
        nx, nt, _ = op.grid.shape
        self._state, self._rhs, self._y, self._out = (
            np.zeros((nx + 2, nt + 2, 4), dtype=complex) for _ in range(4))
        self._history: list[np.ndarray] = []

    def _sweep(self, y, rhs, out):
        op = self.op
        g = op.grid
        return _kernels.fixed_point_sweep_padded(y, rhs, out, self.tau, g.h_x, g.h_theta, op.f, op.K,
                                                 op.V, op.mu, op.nux, op.cos_t, op.weight.c)

    def load(self, psi: np.ndarray) -> None:
        """Set the current state; the history used by the predictor is reset."""
        self._state[1:-1, 1:-1] = psi
        self._history = []

    @property
    def state(self) -> np.ndarray:
        """View of the current state (valid until the next advance)."""
        return self._state[1:-1, 1:-1]

    def step(self, psi: np.ndarray) -> np.ndarray:
        self.load(np.asarray(psi, dtype=complex))
        self.advance()
        return self.state.copy()

    def advance(self) -> None:
        """Advance the loaded state by one step in place."""
        if self.method == "direct":
            psi = self.state
            self._state[1:-1, 1:-1] = self._lu.solve(self._rhs_mat @ psi.ravel()).reshape(psi.shape)
            self.iterations.append(1)
            return
        x, rhs, y, out = self._state, self._rhs, self._y, self._out
        # rhs = psi - i tau S^-1 H psi, which is also the explicit predictor
        self._sweep(x, x, rhs)
        scale = np.sqrt(_kernels.sq_norm(rhs))
        if scale == 0.0:
            x[...] = rhs
            self.iterations.append(0)
            return
        if self.method == "fixed_point":
            hist = self._history
            if len(hist) == 2:
                # quadratic extrapolation from the last three states
                _kernels.extrapolate(y, x, hist[1], hist[0])
            else:
                y[...] = rhs
            prev = np.inf
            for k in range(1, self.max_iter + 1):
                res = np.sqrt(self._sweep(y, rhs, out))
                y, out = out, y
                if res <= self.tol * scale:
                    self.iterations.append(k)
                    # rotate buffers: old state joins the history, y becomes the state
                    if len(hist) == 2:
                        spare = hist.pop(0)
                    else:
                        spare = np.zeros_like(x)
                    hist.append(x)
                    self._state, self._y, self._out = y, out, spare
                    return
                if res > 0.99 * prev and k > 3:
                    log.info("fixed-point iteration stagnating; switching to GMRES")
                    break
                prev = res
            guess = y[1:-1, 1:-1].copy()
        else:
            guess = rhs[1:-1, 1:-1].copy()
        new = self._gmres(rhs[1:-1, 1:-1].copy(), guess)
        self._history = []
        x[1:-1, 1:-1] = new

    def _gmres(self, rhs, x0):
        op = self.op
        shape = rhs.shape
        n = rhs.size

        def mv(v):
            v = v.reshape(shape)
            return (v + 1j * self.tau * op.generator(v)).ravel()

        A = spla.LinearOperator((n, n), matvec=mv, dtype=complex)
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.gmres(A, rhs.ravel(), x0=x0.ravel(), rtol=self.tol, atol=0.0,
                             restart=40, maxiter=self.max_iter, callback=cb, callback_type="pr_norm")
        if info != 0:
            r = rhs.ravel() - mv(x)
            raise ConvergenceError(
                f"GMRES failed (info={info}) at dt={self.dt}: relative residual "
                f"{np.linalg.norm(r) / np.linalg.norm(rhs):.3e} > {self.tol}"
            )
        self.iterations.append(count[0])
        return x.reshape(shape)


@dataclass
class InitialData:
    """Initial wave packet on a Grid2D.

    gaussian_packet: exp(-(x-x0)^2/(4 sigma^2) + i k0 x) times a theta bump
        exp(-(theta-theta0)^2/(4 theta_width^2)) times a constant C^4 spinor.
    angular_mode_packet: the same x profile times W g_m in each two-spinor,
        weighted by (polarization[0], polarization[1]).  W g_m = (g_m lower,
        i g_m upper) is an eigenvector of the angular part of h_1.
    custom_samples: explicit array of shape (n_x, n_theta, 4).
    """

    kind: str = "gaussian_packet"
    x0: float = 0.0
    sigma: float = 1.0
    k0: float = 0.0
    theta0: float = np.pi / 2
    theta_width: float = 0.4
    m: int = 1
    polarization: tuple = (1.0, 0.0, 0.0, 0.0)
    samples: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("gaussian_packet", "angular_mode_packet", "custom_samples"):
            raise ParameterError(f"unknown initial data kind {self.kind!r}")
        if self.kind != "custom_samples" and not self.sigma > 0:
            raise ParameterError("packet width sigma must be positive")

    def x_profile(self, x: np.ndarray) -> np.ndarray:
        return np.exp(-((x - self.x0) ** 2) / (4 * self.sigma**2) + 1j * self.k0 * x)

    def build(self, grid: Grid2D, kappa) -> np.ndarray:
        kappa = check_half_integer(kappa)
        if self.kind == "custom_samples":
            data = np.array(self.samples, dtype=complex)
            if data.shape != grid.shape:
                raise ParameterError(f"custom samples have shape {data.shape}, grid needs {grid.shape}")
        else:
            gx = self.x_profile(grid.x)
            if self.kind == "gaussian_packet":
                pol = np.asarray(self.polarization, dtype=complex)
                if pol.shape != (4,):
                    raise ParameterError("gaussian_packet polarization needs 4 components")
                th = np.exp(-((grid.theta.nodes - self.theta0) ** 2) / (4 * self.theta_width**2))
                data = gx[:, None, None] * th[None, :, None] * pol[None, None, :]
            else:
                pol = np.asarray(self.polarization, dtype=complex)[:2]
                if pol.shape != (2,):
                    raise ParameterError("angular_mode_packet polarization needs 2 components")
                m_max = abs(int(self.m))
                mode = {p.m: p.g for p in eigenbasis(kappa, grid.theta, m_max)}[int(self.m)]
                n = grid.n_theta
                spinor = np.stack([mode[n:], 1j * mode[:n]], axis=-1)  # W g_m, (n_theta, 2)
                data = np.concatenate([pol[0] * spinor, pol[1] * spinor], axis=-1)
                data = gx[:, None, None] * data[None, :, :]
        outside = np.abs(grid.x) > 0.5 * grid.X
        peak = np.abs(data).max()
        if peak == 0.0:
            raise ParameterError("initial data has zero S-norm")
        if np.abs(data[outside]).max(initial=0.0) > 1e-14 * peak:
            raise ParameterError("initial data is not supported inside [-X/2, X/2] to machine precision")
        data[outside] = 0.0
        return np.ascontiguousarray(data)


@dataclass
class Trajectory:
    """Sampled observables of one run; times are signed (negative for backward runs)."""

    kappa: float
    grid: Grid2D
    dt: float
    times: np.ndarray
    s_norm: np.ndarray
    graph_norm: np.ndarray
    boundary_mass: np.ndarray        # (n_samples, 2): left and right zones, fraction of ||psi0||_S^2
    density: np.ndarray              # (n_samples, n_x): int |psi|^2 dtheta
    final: np.ndarray = field(repr=False)
    contamination_time: float | None = None
    warnings: list = field(default_factory=list)
    iterations: list = field(default_factory=list, repr=False)

    @property
    def norm_drift(self) -> float:
        return float(np.max(np.abs(self.s_norm / self.s_norm[0] - 1.0)))

    @property
    def graph_drift(self) -> float:
        g = self.graph_norm
        if g[0] == 0:
            return float(np.max(np.abs(g)))
        return float(np.max(np.abs(g / g[0] - 1.0)))

    def valid_until(self) -> float:
        return np.inf if self.contamination_time is None else abs(self.contamination_time)


def x_density(psi: np.ndarray, grid: Grid2D) -> np.ndarray:
    return np.sum(np.abs(psi) ** 2, axis=(1, 2)) * grid.h_theta


def boundary_masses(psi: np.ndarray, grid: Grid2D, total: float) -> tuple[float, float]:
    dens = _kernels.s_density(psi, grid.weight.c).sum(axis=1) * grid.cell
    edge = (1.0 - BOUNDARY_ZONE) * grid.X
    if total == 0:
        return 0.0, 0.0
    return float(dens[grid.x < -edge].sum() / total), float(dens[grid.x > edge].sum() / total)


class SnapshotWriter:
    """Background writer for binary field dumps plus a CSV manifest.

    Dump layout (little-endian): float64 t, float64 kappa, uint64 n_x,
    uint64 n_theta, then n_x*n_theta*4 complex128 values in C order
    (x, theta, component).
    """

    def __init__(self, directory, prefix: str = "snap"):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.prefix = prefix
        self.files: list[Path] = []
        self._q: queue.Queue = queue.Queue(maxsize=8)
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()
        self.manifest = self.dir / f"{prefix}_manifest.csv"
        self._rows = ["step,t,s_norm,boundary_mass"]

    def _drain(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            path, header, data = item
            with open(path, "wb") as fh:
                fh.write(header)
                fh.write(np.ascontiguousarray(data, dtype="<c16").tobytes())

    def submit(self, step: int, t: float, kappa: float, psi: np.ndarray, snorm: float, bmass: float):
        path = self.dir / f"{self.prefix}_{step:08d}.bin"
        header = struct.pack("<ddQQ", t, kappa, psi.shape[0], psi.shape[1])
        self._q.put((path, header, psi.copy()))
        self.files.append(path)
        self._rows.append(f"{step},{t:.17g},{snorm:.17g},{bmass:.17g}")

    def close(self):
        self._q.put(None)
        self._thread.join()
        self.manifest.write_text("\n".join(self._rows) + "\n")
        self.files.append(self.manifest)


def read_snapshot(path):
    with open(path, "rb") as fh:
        t, kappa, nx, nt = struct.unpack("<ddQQ", fh.read(32))
        data = np.frombuffer(fh.read(), dtype="<c16").reshape(nx, nt, 4).astype(complex)
    return t, kappa, data


def evolve(op: PartialWaveOperator, init, cfg: EvolutionConfig, direction: int = 1,
           snapshot_dir=None, snapshot_prefix: str | None = None) -> Trajectory:
    """Run U(direction * t) psi0 for t in [0, t_final], sampling every snapshot_stride steps.

    ``init`` is an InitialData or an array.  A boundary warning is recorded the
    first time the S-mass in either 5% edge zone exceeds the threshold.
    """
    grid = op.grid
    psi = init.build(grid, op.kappa) if isinstance(init, InitialData) else np.array(init, dtype=complex)
    if psi.shape != grid.shape:
        raise ParameterError(f"initial field shape {psi.shape} != grid shape {grid.shape}")
    dt = cfg.dt * (1 if direction >= 0 else -1)
    stepper = CrankNicolson(op, dt, cfg.solver_tol, cfg.solver)
    n0sq = s_norm(psi, grid) ** 2
    writer = None
    if snapshot_dir is not None:
        writer = SnapshotWriter(snapshot_dir, snapshot_prefix or f"kappa{op.kappa:+g}_{'fwd' if dt > 0 else 'bwd'}")

    times, norms, graphs, bmass, dens = [], [], [], [], []
    warnings: list[str] = []
    contamination = None

    def record(step, psi):
        nonlocal contamination
        t = step * dt
        sn = s_norm(psi, grid)
        gn = s_norm(op.generator(psi), grid) if cfg.track_graph_norm else np.nan
        left, right = boundary_masses(psi, grid, n0sq)
        times.append(t)
        norms.append(sn)
        graphs.append(gn)
        bmass.append((left, right))
        dens.append(x_density(psi, grid))
        if contamination is None and max(left, right) > cfg.boundary_mass_threshold:
            contamination = t
            warnings.append(
                f"boundary mass {max(left, right):.3e} exceeds threshold {cfg.boundary_mass_threshold:g} "
                f"at t={t:.6g}; later samples are truncation-contaminated"
            )
            log.warning(warnings[-1])
        if writer is not None:
            writer.submit(step, t, op.kappa, psi, sn, max(left, right))

    record(0, psi)
    stepper.load(psi)
    for step in range(1, cfg.n_steps + 1):
        stepper.advance()
        if step % cfg.snapshot_stride == 0 or step == cfg.n_steps:
            record(step, stepper.state)
    psi = stepper.state.copy()
    if writer is not None:
        writer.close()

    traj = Trajectory(
        kappa=op.kappa, grid=grid, dt=dt, times=np.array(times), s_norm=np.array(norms),
        graph_norm=np.array(graphs), boundary_mass=np.array(bmass).reshape(-1, 2),
        density=np.array(dens), final=psi, contamination_time=contamination,
        warnings=warnings, iterations=stepper.iterations,
    )
    traj.snapshot_files = writer.files if writer is not None else []
    return traj


def conservation_tolerance(cfg: EvolutionConfig, n_steps: int) -> float:
    return 1e2 * cfg.solver_tol * max(1, n_steps)


def check_conservation(traj: Trajectory, cfg: EvolutionConfig, graph_factor: float = 1.0) -> list[str]:
    """Compare the drift of ||psi||_S and ||S^-1 H psi||_S with O(n solver_tol).

    Solver errors enter the graph norm amplified by the generator, hence the
    optional ``graph_factor`` on its tolerance.
    """
    n = max(1, int(round(abs(traj.times[-1] / traj.dt)))) if traj.times.size else 1
    tol = conservation_tolerance(cfg, n)
    issues = []
    if traj.norm_drift > tol:
        issues.append(f"S-norm drift {traj.norm_drift:.3e} exceeds {tol:.1e}")
    if cfg.track_graph_norm and traj.graph_drift > tol * graph_factor:
        issues.append(f"graph-norm drift {traj.graph_drift:.3e} exceeds {tol * graph_factor:.1e}")
    return issues


def symmetric_run(op: PartialWaveOperator, init, cfg: EvolutionConfig, **kw) -> Trajectory:
    """Forward and backward runs merged into one record on [-t_final, t_final]."""
    fwd = evolve(op, init, cfg, direction=1, **kw)
    bwd = evolve(op, init, cfg, direction=-1, **kw)
    order = np.argsort(np.concatenate([bwd.times[1:], fwd.times]))
    cat = lambda a, b: np.concatenate([a[1:], b])[order]
    contamination = [t for t in (fwd.contamination_time, bwd.contamination_time) if t is not None]
    merged = Trajectory(
        kappa=op.kappa, grid=op.grid, dt=fwd.dt,
        times=cat(bwd.times, fwd.times), s_norm=cat(bwd.s_norm, fwd.s_norm),
        graph_norm=cat(bwd.graph_norm, fwd.graph_norm),
        boundary_mass=cat(bwd.boundary_mass, fwd.boundary_mass),
        density=cat(bwd.density, fwd.density), final=fwd.final,
        contamination_time=min(contamination, key=abs) if contamination else None,
        warnings=bwd.warnings + fwd.warnings, iterations=bwd.iterations + fwd.iterations,
    )
    merged.snapshot_files = getattr(bwd, "snapshot_files", []) + getattr(fwd, "snapshot_files", [])
    return merged


@dataclass
class SuperpositionResult:
    kappas: list
    coefficients: np.ndarray
    times: np.ndarray
    mode_norms: np.ndarray           # (n_samples, n_modes) ||U psi_kappa||_S
    combined_norm_sq: np.ndarray     # phi-quadrature of the combined field
    parseval_error: np.ndarray       # relative deviation from 2 pi sum |c|^2 ||psi_kappa||_S^2
    trajectories: list
    finals: list = field(repr=False)


def evolve_superposition(grid: Grid2D, modes, cfg: EvolutionConfig, mass: float = 0.0,
                         potential=None, threads: int = 1) -> SuperpositionResult:
    """Evolve sum_kappa e^{-i kappa phi} c_kappa U^(kappa)(t) psi_kappa mode by mode.

    ``modes`` is a list of (kappa, coefficient, InitialData or array).
    """
    kappas = [check_half_integer(k) for k, _, _ in modes]
    if len(set(kappas)) != len(kappas):
        raise ParameterError(f"duplicate kappa entries in superposition: {kappas}")
    if not modes:
        raise ParameterError("superposition needs at least one mode")
    coeffs = np.array([complex(c) for _, c, _ in modes])
    ops = [PartialWaveOperator(grid, k, mass, potential) for k in kappas]
    fields = [
        (init.build(grid, k) if isinstance(init, InitialData) else np.array(init, dtype=complex))
        for k, (_, _, init) in zip(kappas, modes)
    ]
    steppers = [CrankNicolson(op, cfg.dt, cfg.solver_tol, cfg.solver) for op in ops]
    spread = max(abs(a - b) for a in kappas for b in kappas)
    n_phi = int(2 * spread + 2)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi

    def sample():
        norms = np.array([s_norm(f, grid) for f in fields])
        total = 0.0
        for p in phi:
            comb = sum(c * np.exp(-1j * k * p) * f for k, c, f in zip(kappas, coeffs, fields))
            total += s_norm(comb, grid) ** 2
        total *= 2 * np.pi / n_phi
        expect = 2 * np.pi * np.sum(np.abs(coeffs) ** 2 * norms**2)
        err = abs(total - expect) / expect if expect > 0 else abs(total)
        return norms, total, err

    times, mode_norms, comb, errs = [], [], [], []

    def push(step):
        norms, total, err = sample()
        times.append(step * cfg.dt)
        mode_norms.append(norms)
        comb.append(total)
        errs.append(err)

    push(0)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for step in range(1, cfg.n_steps + 1):
            if pool is None:
                fields = [st.step(f) for st, f in zip(steppers, fields)]
            else:
                fields = list(pool.map(lambda sf: sf[0].step(sf[1]), zip(steppers, fields)))
            if step % cfg.snapshot_stride == 0 or step == cfg.n_steps:
                push(step)
    finally:
        if pool is not None:
            pool.shutdown()
    return SuperpositionResult(
        kappas=kappas, coefficients=coeffs, times=np.array(times), mode_norms=np.array(mode_norms),
        combined_norm_sq=np.array(comb), parseval_error=np.array(errs),
        trajectories=[], finals=fields,
    )


def grid_key(grid: Grid2D) -> dict:
    bh = grid.bh
    return {"M": bh.M, "a": bh.a, "Q": bh.Q, "x_offset": bh.x_offset,
            "X": grid.X, "n_x": grid.n_x, "n_theta": grid.n_theta}


def save_trajectory(path, traj: Trajectory) -> None:
    """Observable record (no fields) as an .npz archive for later analysis."""
    key = grid_key(traj.grid)
    np.savez(
        path, times=traj.times, s_norm=traj.s_norm, graph_norm=traj.graph_norm,
        boundary_mass=traj.boundary_mass, density=traj.density, kappa=traj.kappa, dt=traj.dt,
        contamination_time=np.nan if traj.contamination_time is None else traj.contamination_time,
        grid_key=np.array([key[k] for k in GRID_KEYS], dtype=float),
    )


GRID_KEYS = ("M", "a", "Q", "x_offset", "X", "n_x", "n_theta")


@dataclass
class StoredTrajectory:
    """Trajectory observables read back from disk, bound to a matching grid."""

    kappa: float
    grid: Grid2D
    dt: float
    times: np.ndarray
    s_norm: np.ndarray
    graph_norm: np.ndarray
    boundary_mass: np.ndarray
    density: np.ndarray
    contamination_time: float | None

    def valid_until(self) -> float:
        return np.inf if self.contamination_time is None else abs(self.contamination_time)


def load_trajectory(path, grid: Grid2D) -> StoredTrajectory:
    """Load a saved record; raises ParameterError naming any grid mismatch."""
    with np.load(path) as z:
        stored = dict(zip(GRID_KEYS, z["grid_key"].tolist()))
        want = grid_key(grid)
        bad = [f"{k}: stored {stored[k]:g} != configured {want[k]:g}"
               for k in GRID_KEYS if not np.isclose(stored[k], want[k], rtol=1e-14, atol=0)]
        if bad:
            raise ParameterError(f"trajectory {path} was computed on a different grid ({'; '.join(bad)})")
        ct = float(z["contamination_time"])
        return StoredTrajectory(
            kappa=float(z["kappa"]), grid=grid, dt=float(z["dt"]), times=z["times"], s_norm=z["s_norm"],
            graph_norm=z["graph_norm"], boundary_mass=z["boundary_mass"], density=z["density"],
            contamination_time=None if np.isnan(ct) else ct,
        )
