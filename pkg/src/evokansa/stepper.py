"""theta-scheme time loop for the analytic (alg1) and pseudospectral (alg2a/2b) paths.

Every step solves, in the least-squares sense,

    [base^m + (1-theta) dt A^m] c^m = base^{m-1} c^{m-1} - theta dt A^{m-1} c^{m-1}
                                      + dt [(1-theta) f^m + theta f^{m-1}]

where X^m and X^{m-1} are images of the same parameter points or particles.
alg1 works with kernel coefficients directly; alg2 works with nodal values on
Z and converts to coefficients with Psi(Z,Z)^{-1} once per step.
"""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import scipy.linalg as sla

from . import kernels, operators, surfaces
from .diagnostics import ManufacturedSource
from .exprdsl import Expr, evaluate
from .kernels import GramFactor, KernelSpec
from .operators import OperatorForm, OperatorSystem, SurfaceData
from .surfaces import AmbientField, CollocationSet, ParametricSurface, PointCloudFrame


class Algorithm(str, enum.Enum):
    ALG1 = "alg1"
    ALG2A = "alg2a"
    ALG2B = "alg2b"

    @property
    def analytic(self) -> bool:
        return self is Algorithm.ALG1

    @property
    def variant(self) -> str:
        return "b" if self is Algorithm.ALG2B else "a"


class StepperError(RuntimeError):
    pass


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, rank: int, n: int, singular_values: np.ndarray):
        sv = np.asarray(singular_values)
        report = ", ".join(f"{x:.3e}" for x in sv[-5:])
        super().__init__(
            f"least-squares matrix has numerical rank {rank} < {n}; "
            f"smallest singular values: {report}"
        )
        self.rank = rank
        self.singular_values = sv


class StepError(StepperError):
    """A numerical failure tagged with the step index where it happened."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


# ----------------------------------------------------------------- problem


@dataclass
class ProblemSpec:
    eps: float
    dt: float
    T: float
    u0: Expr
    source: Expr | ManufacturedSource | None = None
    theta: float = 0.5
    form: OperatorForm = OperatorForm.CONSISTENT
    u_star: Expr | None = None

    def __post_init__(self):
        if self.eps < 0:
            raise StepperError("diffusivity must be nonnegative")
        if not 0.0 <= self.theta <= 1.0:
            raise StepperError("theta must lie in [0, 1]")
        if self.dt <= 0:
            raise StepperError("time step must be positive")
        if self.T < 0:
            raise StepperError("final time must be nonnegative")
        self.form = OperatorForm(self.form)

    def times(self) -> np.ndarray:
        return time_grid(self.T, self.dt)


def time_grid(T: float, dt: float) -> np.ndarray:
    """0, dt, 2dt, ..., with the last step clipped to land on T."""
    ratio = T / dt
    n = int(round(ratio))
    if abs(ratio - n) > 1e-9 * max(1.0, ratio):
        n = int(math.floor(ratio))
    ts = [k * dt for k in range(n + 1)]
    if T - ts[-1] > 1e-12 * max(1.0, T):
        ts.append(T)
    else:
        ts[-1] = T if n > 0 else 0.0
    return np.asarray(ts, dtype=float)


# --------------------------------------------------------------- snapshots


@dataclass
class Snapshot:
    """Surface data for one time level at X (and Z)."""

    t: float
    X: np.ndarray
    Z: np.ndarray
    x_is_z: bool
    normals_X: np.ndarray
    normals_Z: np.ndarray
    divv_X: np.ndarray | None = None
    vel_X: np.ndarray | None = None
    H_X: np.ndarray | None = None
    phi_X: np.ndarray | None = None
    phi_Z: np.ndarray | None = None

    def surface_data(self) -> SurfaceData:
        return SurfaceData(self.X, self.Z, self.normals_X, self.normals_Z, self.H_X,
                           self.divv_X, self.vel_X, self.x_is_z)


class Track(Protocol):
    """Supplies the surface snapshot at every time level."""

    triangles: np.ndarray | None
    surface: ParametricSurface | None

    def at(self, t: float, prev: Snapshot | None) -> Snapshot: ...


def _estimate_pair(X, Z, x_is_z, k, spec):
    nX = surfaces.estimate_normals(X, k=k, spec=spec)
    if x_is_z:
        return nX, nX
    nZ = surfaces.estimate_normals(X, Z, k=k, spec=spec)
    # align each Z normal with the nearest X normal
    from scipy.spatial import cKDTree

    _, j = cKDTree(X).query(Z, k=1)
    flip = np.sum(nZ * nX[j], axis=-1) < 0
    nZ[flip] *= -1
    return nX, nZ


@dataclass
class ParametricTrack:
    """Nodes fixed in parameter space and re-evaluated on x(phi, t)."""

    surface: ParametricSurface
    nodes: CollocationSet
    normals: str = "analytic"
    knn: int = 20
    normal_spec: KernelSpec | None = None

    def __post_init__(self):
        if self.normals not in ("analytic", "estimated"):
            raise StepperError("normals must be 'analytic' or 'estimated'")

    @property
    def triangles(self) -> np.ndarray:
        return surfaces.grid_triangles(self.nodes.counts_X, self.surface.periodic)

    def at(self, t: float, prev: Snapshot | None = None) -> Snapshot:
        s, cs = self.surface, self.nodes
        gX = s.geometry(cs.phi_X, t)
        gZ = gX if cs.x_is_z else s.geometry(cs.phi_Z, t)
        if self.normals == "analytic":
            nX, nZ = gX.normals(), gZ.normals()
        else:
            nX, nZ = _estimate_pair(gX.points, gZ.points, cs.x_is_z, self.knn, self.normal_spec)
        Z = gX.points if cs.x_is_z else gZ.points
        return Snapshot(t, gX.points, Z, cs.x_is_z, nX, nZ, gX.div_velocity(), gX.velocity,
                        gX.mean_curvature(), cs.phi_X, cs.phi_Z)


def _discrete_divergence(snap_X, snap_Z, normals_X, vel_Z, spec):
    """div_S v = sum_k G_k(X, Z) v_k(Z) from nodal velocities."""
    G, _ = operators.build_gk(snap_X, snap_Z, normals_X, spec)
    return sum(G[k] @ vel_Z[:, k] for k in range(spec.d))


@dataclass
class AdvectedTrack:
    """Particles moved by forward Euler through an ambient velocity field."""

    X0: np.ndarray
    Z0: np.ndarray
    velocity: AmbientField
    x_is_z: bool = False
    triangles: np.ndarray | None = None
    knn: int = 20
    normal_spec: KernelSpec | None = None
    t0: float = 0.0
    surface: None = None

    def _snap(self, t, X, Z):
        nX, nZ = _estimate_pair(X, Z, self.x_is_z, self.knn, self.normal_spec)
        J = self.velocity.jacobian(X, t)
        divv = operators.surface_divergence_field(J, nX)
        return Snapshot(t, X, Z, self.x_is_z, nX, nZ, divv, self.velocity(X, t))

    def at(self, t: float, prev: Snapshot | None = None) -> Snapshot:
        if prev is None:
            if abs(t - self.t0) > 1e-12:
                raise StepperError("advected tracks start at their initial time")
            X = np.asarray(self.X0, float)
            Z = X if self.x_is_z else np.asarray(self.Z0, float)
            return self._snap(t, X, Z)
        dt = t - prev.t
        X = surfaces.advect(prev.X, self.velocity, prev.t, dt)
        Z = X if self.x_is_z else surfaces.advect(prev.Z, self.velocity, prev.t, dt)
        return self._snap(t, X, Z)


@dataclass
class FrameTrack:
    """Ingested point-cloud frames; Z is a fixed index subset of each frame.

    Velocities come from the frames if present, else finite differences of
    particle positions between neighbouring frames.
    """

    frames: list[PointCloudFrame]
    z_index: np.ndarray | None = None
    knn: int = 20
    normal_spec: KernelSpec | None = None
    div_spec: KernelSpec | None = None
    surface: None = None

    def __post_init__(self):
        if len(self.frames) < 1:
            raise StepperError("no frames")
        K = {len(f.points) for f in self.frames}
        if len(K) != 1:
            raise StepperError("all ingested frames must hold the same number of particles")
        if self.z_index is None:
            self.z_index = np.arange(len(self.frames[0].points))
        self.z_index = np.asarray(self.z_index, int)

    @property
    def x_is_z(self) -> bool:
        return len(self.z_index) == len(self.frames[0].points) and np.all(
            self.z_index == np.arange(len(self.z_index)))

    @property
    def triangles(self):
        return self.frames[0].triangles

    @property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])

    def _velocity(self, i: int) -> np.ndarray:
        f = self.frames[i]
        if f.velocities is not None:
            return f.velocities
        if len(self.frames) < 2:
            return np.zeros_like(f.points)
        a, b = (i - 1, i) if i > 0 else (0, 1)
        fa, fb = self.frames[a], self.frames[b]
        return (fb.points - fa.points) / (fb.t - fa.t)

    def at(self, t: float, prev: Snapshot | None = None) -> Snapshot:
        ts = self.times
        i = int(np.argmin(np.abs(ts - t)))
        if abs(ts[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise StepperError(f"no ingested frame at t={t}; time steps must match the frame gaps")
        X = self.frames[i].points
        xz = self.x_is_z
        Z = X if xz else X[self.z_index]
        nX, nZ = _estimate_pair(X, Z, xz, self.knn, self.normal_spec)
        v = self._velocity(i)
        spec = self.div_spec or KernelSpec(mu=4.0, d=X.shape[1])
        divv = _discrete_divergence(X, Z, nX, v[self.z_index], spec)
        return Snapshot(t, X, Z, xz, nX, nZ, divv, v)


# ---------------------------------------------------------- linear algebra


@dataclass
class LstsqResult:
    solution: np.ndarray
    residual: float
    rank: int
    condition: float


def least_squares_solve(M, b) -> LstsqResult:
    """min ||M x - b||_2 via column-pivoted Householder QR."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    b = np.asarray(b, dtype=float)
    m, n = M.shape
    if m < n:
        raise StepperError(f"least-squares system is underdetermined ({m} x {n})")
    Q, R, piv = sla.qr(M, mode="economic", pivoting=True)
    dg = np.abs(np.diag(R))
    tol = max(m, n) * np.finfo(float).eps * (dg[0] if n else 0.0)
    rank = int(np.sum(dg > tol))
    if rank < n:
        raise RankDeficiencyError(rank, n, sla.svdvals(M))
    y = sla.solve_triangular(R, Q.T @ b, check_finite=False)
    x = np.empty(n)
    x[piv] = y
    res = float(np.linalg.norm(M @ x - b))
    return LstsqResult(x, res, rank, float(dg[0] / dg[-1]))


def _node_values(u0, Z, t=0.0):
    if isinstance(u0, Expr):
        d = Z.shape[1]
        b = {f"x{i + 1}": Z[:, i] for i in range(d)}
        b["t"] = np.full(len(Z), float(t))
        return np.broadcast_to(np.asarray(evaluate(u0, b), float), (len(Z),)).copy()
    if callable(u0):
        return np.asarray(u0(Z), float)
    return np.asarray(u0, float)


def interpolate_ic(u0, Z, spec: KernelSpec, factor: GramFactor | None = None) -> np.ndarray:
    """Coefficients with Psi(Z,Z) lam = u0(Z)."""
    Z = np.atleast_2d(np.asarray(Z, float))
    vals = _node_values(u0, Z)
    factor = factor or operators.factor_gram(spec, Z)
    return factor.solve(vals)


def regularized_interpolate(values, Z, spec: KernelSpec, p: float) -> np.ndarray:
    """(Psi(Z,Z) + p I) lam = values; p = 0 is plain interpolation."""
    if p < 0:
        raise StepperError("ridge parameter must be nonnegative")
    Z = np.atleast_2d(np.asarray(Z, float))
    if p == 0:
        return interpolate_ic(values, Z, spec)
    vals = _node_values(values, Z)
    G = kernels.gram(spec, Z, Z) + p * np.eye(len(Z))
    return sla.cho_solve(sla.cho_factor(G, lower=True), vals)


@dataclass
class LCurveResult:
    p: float
    index: int
    low_confidence: bool
    residual_norms: np.ndarray
    solution_norms: np.ndarray
    curvature: np.ndarray


def l_curve_select(values, Z, spec: KernelSpec, p_grid) -> LCurveResult:
    """Corner of the (log residual, log ||lam||) curve over a log-spaced p grid."""
    p_grid = np.asarray(p_grid, dtype=float)
    if np.any(p_grid <= 0):
        raise StepperError("L-curve grid must be positive")
    Z = np.atleast_2d(np.asarray(Z, float))
    v = _node_values(values, Z)
    w, Q = np.linalg.eigh(kernels.gram(spec, Z, Z))
    beta = Q.T @ v
    res = np.array([np.linalg.norm(p / (w + p) * beta) for p in p_grid])
    sol = np.array([np.linalg.norm(beta / (w + p)) for p in p_grid])
    if len(p_grid) < 3:
        k = np.zeros(len(p_grid))
        return LCurveResult(float(p_grid[0]), 0, True, res, sol, k)
    tiny = np.finfo(float).tiny
    x, y, s = np.log(res + tiny), np.log(sol + tiny), np.log(p_grid)
    x1, y1 = np.gradient(x, s), np.gradient(y, s)
    x2, y2 = np.gradient(x1, s), np.gradient(y1, s)
    denom = (x1 * x1 + y1 * y1) ** 1.5
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(denom > 0, np.abs(x1 * y2 - y1 * x2) / denom, 0.0)
    # one-sided differences at the ends are unreliable, pick the interior corner
    interior = kappa[1:-1]
    i = 1 + int(np.argmax(interior))
    degenerate = not np.isfinite(interior).all() or float(np.max(interior)) <= 1e-8
    low = degenerate or len(p_grid) < 10 or i in (1, len(p_grid) - 2)
    return LCurveResult(float(p_grid[i]), i, low, res, sol, kappa)


# ------------------------------------------------------------------ solver


@dataclass
class StepReport:
    m: int
    t: float
    dt: float
    residual: float
    rhs_norm: float
    shape: tuple[int, int]
    conditions: dict[str, float] = field(default_factory=dict)
    jitter: list[tuple[str, int, float]] = field(default_factory=list)
    wall_time: float = 0.0


@dataclass
class SolverState:
    m: int
    t: float
    coef: np.ndarray
    nodal: np.ndarray | None
    snap: Snapshot
    system: OperatorSystem
    f_X: np.ndarray | float

    @property
    def unknowns(self) -> np.ndarray:
        return self.nodal if self.system.nodal else self.coef

    @property
    def values_X(self) -> np.ndarray:
        return self.system.base @ self.unknowns


def build_rhs(prev: SolverState, problem: ProblemSpec, dt: float, f_new) -> np.ndarray:
    """g^m from the S^{m-1} system paired with X^m by parameter/particle identity."""
    if prev is None:
        raise StepperError("build_rhs needs the previous state")
    c = prev.unknowns
    sysp = prev.system
    th = problem.theta
    g = sysp.base @ c - th * dt * (sysp.A @ c)
    return g + dt * ((1.0 - th) * np.asarray(f_new) + th * np.asarray(prev.f_X))


class Solver:
    """Drives one algorithm over a track.

    ``ridge > 0`` turns every solve into the square regularized system
    (L Psi + p I) lam = g used as a comparison baseline; ``ic_ridge`` only
    regularizes the initial interpolation.
    """

    def __init__(self, problem: ProblemSpec, track: Track, spec: KernelSpec,
                 algorithm: Algorithm | str = Algorithm.ALG1, ridge: float = 0.0,
                 ic_ridge: float = 0.0):
        self.problem = problem
        self.track = track
        self.spec = spec
        self.algorithm = Algorithm(algorithm)
        self.ridge = float(ridge)
        self.ic_ridge = float(ic_ridge)
        if self.algorithm.analytic and getattr(track, "surface", None) is None:
            raise StepperError("alg1 needs a parametric surface (analytic normals and curvature)")
        if isinstance(problem.source, ManufacturedSource) and getattr(track, "surface", None) is None:
            raise StepperError("manufactured sources need a parametric surface")

    def system(self, snap: Snapshot) -> OperatorSystem:
        data = snap.surface_data()
        p = self.problem
        if self.algorithm.analytic:
            return operators.analytic_system(data, p.eps, p.form, self.spec)
        return operators.discrete_system(data, p.eps, p.form, self.spec, self.algorithm.variant)

    def source_values(self, snap: Snapshot) -> np.ndarray | float:
        f = self.problem.source
        if f is None:
            return 0.0
        if isinstance(f, ManufacturedSource):
            return f(snap.phi_X, snap.t)
        return _node_values(f, snap.X, snap.t)

    def _coefficients_from_nodal(self, system: OperatorSystem, nodal, Z):
        fac = system.factor_Z or operators.factor_gram(self.spec, Z)
        return fac.solve(nodal)

    def initialize(self, t0: float = 0.0) -> SolverState:
        snap = self.track.at(t0, None)
        system = self.system(snap)
        if self.ic_ridge > 0:
            coef = regularized_interpolate(_node_values(self.problem.u0, snap.Z, t0), snap.Z,
                                           self.spec, self.ic_ridge)
        else:
            coef = interpolate_ic(_node_values(self.problem.u0, snap.Z, t0), snap.Z, self.spec,
                                  system.factor_Z)
        nodal = kernels.gram(self.spec, snap.Z, snap.Z) @ coef if system.nodal else None
        return SolverState(0, t0, coef, nodal, snap, system, self.source_values(snap))

    def step(self, state: SolverState, t_new: float) -> tuple[SolverState, StepReport]:
        start = time.perf_counter()
        dt = t_new - state.t
        if dt <= 0:
            raise StepperError("time must increase")
        snap = self.track.at(t_new, state.snap)
        system = self.system(snap)
        f_new = self.source_values(snap)
        g = build_rhs(state, self.problem, dt, f_new)
        L = system.lhs(self.problem.theta, dt)
        conds = {}
        if system.factor_Z is not None:
            conds["gram_Z"] = system.factor_Z.condition_estimate
        if self.ridge > 0:
            coef, nodal, res, cond = self._ridge_solve(system, L, g, snap)
        else:
            sol = least_squares_solve(L, g)
            res, cond = sol.residual, sol.condition
            if system.nodal:
                nodal = sol.solution
                coef = system.factor_Z.solve(nodal)
            else:
                coef, nodal = sol.solution, None
        conds["qr"] = cond
        if not np.all(np.isfinite(coef)):
            raise StepperError("non-finite coefficients")
        new = SolverState(state.m + 1, t_new, coef, nodal, snap, system, f_new)
        report = StepReport(new.m, t_new, dt, res, float(np.linalg.norm(g)), L.shape, conds,
                            list(system.factorizations), time.perf_counter() - start)
        return new, report

    def _ridge_solve(self, system, L, g, snap):
        if L.shape[0] != L.shape[1]:
            raise StepperError("the regularized baseline needs X = Z")
        Lc = L @ kernels.gram(self.spec, snap.Z, snap.Z) if system.nodal else L
        M = Lc + self.ridge * np.eye(L.shape[1])
        lu = sla.lu_factor(M)
        coef = sla.lu_solve(lu, g)
        res = float(np.linalg.norm(M @ coef - g))
        nodal = kernels.gram(self.spec, snap.Z, snap.Z) @ coef if system.nodal else None
        dg = np.abs(np.diag(lu[0]))
        return coef, nodal, res, float(dg.max() / dg.min())


# --------------------------------------------------------------------- run


@dataclass
class StepRecord:
    m: int
    t: float
    X: np.ndarray
    values: np.ndarray
    coef: np.ndarray
    report: StepReport | None
    diagnostics: dict[str, float] = field(default_factory=dict)


@dataclass
class Trajectory:
    records: list[StepRecord]
    summary: dict[str, object]

    def column(self, key: str) -> np.ndarray:
        return np.array([r.diagnostics.get(key, np.nan) for r in self.records])

    @property
    def times(self) -> np.ndarray:
        return np.array([r.t for r in self.records])


def march(solver: Solver, times, observer: Callable[[SolverState, StepReport | None], dict] | None = None,
          keep_values: bool = True) -> Trajectory:
    """Initialise at times[0] and step through the rest."""
    times = np.asarray(times, float)
    t_start = time.perf_counter()
    try:
        state = solver.initialize(float(times[0]))
    except Exception as exc:  # noqa: BLE001 - tag and rethrow numerical failures
        raise StepError(0, exc) from exc
    records = []

    def record(st, rep):
        diag = observer(st, rep) if observer else {}
        if rep is not None:
            diag.setdefault("residual", rep.residual)
        vals = st.values_X if keep_values else np.empty(0)
        records.append(StepRecord(st.m, st.t, st.snap.X if keep_values else np.empty((0, 0)),
                                  vals, st.coef, rep, diag))

    record(state, None)
    for t_new in times[1:]:
        try:
            state, rep = solver.step(state, float(t_new))
        except (np.linalg.LinAlgError, StepperError, surfaces.SurfaceError, ValueError) as exc:
            raise StepError(state.m + 1, exc) from exc
        record(state, rep)
    summary = {
        "algorithm": solver.algorithm.value,
        "steps": len(times) - 1,
        "n_Z": len(state.snap.Z),
        "n_X": len(state.snap.X),
        "final_time": float(state.t),
        "wall_time": time.perf_counter() - t_start,
    }
    return Trajectory(records, summary)


def run(config, observer=None) -> Trajectory:
    """Build a solver from a RunConfig and march it; see ``config.build_setup``."""
    from .config import build_setup

    setup = build_setup(config)
    obs = observer or setup.observer
    return march(setup.solver, setup.problem.times(), obs)
