"""Quadrature meshes, error norms, mass, eoc and manufactured sources."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from . import operators, surfaces
from .exprdsl import Expr, eval_jet2, parse
from .kernels import KernelSpec
from .operators import OperatorForm
from .surfaces import ParametricSurface, PointCloudFrame


class QuadratureError(ValueError):
    pass


@dataclass
class QuadratureMesh:
    vertices: np.ndarray
    elements: np.ndarray  # (E, 3) triangles in R^3, (E, 2) segments in R^2
    measures: np.ndarray
    phi: np.ndarray | None = None  # parameter preimages of the vertices

    def __post_init__(self):
        if np.any(self.measures <= 0):
            raise QuadratureError("mesh has degenerate elements")

    @property
    def area(self) -> float:
        return float(np.sum(self.measures))

    @property
    def vertex_weights(self) -> np.ndarray:
        """Lumped weights: each element gives measure / (vertices per element)."""
        w = np.zeros(len(self.vertices))
        per = self.elements.shape[1]
        for j in range(per):
            np.add.at(w, self.elements[:, j], self.measures / per)
        return w


def element_measures(vertices: np.ndarray, elements: np.ndarray) -> np.ndarray:
    v = vertices[elements]
    if elements.shape[1] == 2:
        return np.linalg.norm(v[:, 1] - v[:, 0], axis=-1)
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)


def mesh_from_elements(vertices, elements, phi=None) -> QuadratureMesh:
    vertices = np.asarray(vertices, float)
    elements = np.asarray(elements, int)
    meas = element_measures(vertices, elements)
    keep = meas > 1e-15 * max(float(np.max(meas)), 1e-300)
    elements, meas = elements[keep], meas[keep]
    return QuadratureMesh(vertices, elements, meas, phi)


def build_quadrature(surface, t: float = 0.0, resolution=None, triangles=None) -> QuadratureMesh:
    """Mesh a parametric surface, a convex cloud, or a cloud with given triangles.

    ``resolution`` for parametric surfaces is a per-axis count tuple or a
    total vertex count.
    """
    if isinstance(surface, ParametricSurface):
        if resolution is None:
            raise QuadratureError("parametric meshes need a resolution")
        if np.isscalar(resolution):
            counts = surfaces.grid_counts(surface, t, target_n=int(resolution))
        else:
            counts = tuple(int(c) for c in resolution)
        phi = surfaces.parameter_grid(surface, counts)
        verts = surface.points(phi, t)
        elems = surfaces.grid_triangles(counts, surface.periodic)
        return mesh_from_elements(verts, elems, phi)
    pts = surface.points if isinstance(surface, PointCloudFrame) else np.asarray(surface, float)
    if triangles is None and isinstance(surface, PointCloudFrame):
        triangles = surface.triangles
    if triangles is not None:
        return mesh_from_elements(pts, triangles)
    hull = ConvexHull(pts)
    if len(hull.vertices) != len(pts):
        raise QuadratureError(
            "cloud is not convex; supply a triangle list for its quadrature mesh"
        )
    return mesh_from_elements(pts, hull.simplices)


def _square(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return v * v if v.ndim == 1 else np.sum(v * v, axis=-1)


def l2_norm(values, mesh: QuadratureMesh) -> float:
    """Lumped L2 norm; vector-valued fields use their pointwise magnitude."""
    return math.sqrt(float(np.dot(_square(values), mesh.vertex_weights)))


def mass(values, mesh: QuadratureMesh) -> float:
    return float(np.dot(np.asarray(values, float), mesh.vertex_weights))


def eoc(e_prev: float, e_cur: float, h_prev: float, h_cur: float) -> float:
    if min(e_prev, e_cur, h_prev, h_cur) <= 0:
        raise ValueError("eoc needs positive errors and fill distances")
    if h_prev == h_cur:
        raise ValueError("eoc needs distinct fill distances")
    return math.log(e_cur / e_prev) / math.log(h_cur / h_prev)


@dataclass
class ErrorSeries:
    """Per-step values of one norm; ``sup`` realises the L-infinity in time."""

    times: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    h: list[float] = field(default_factory=list)

    def record(self, t: float, value: float, h: float = float("nan")) -> None:
        self.times.append(float(t))
        self.values.append(float(value))
        self.h.append(float(h))

    @property
    def sup(self) -> float:
        return max(self.values) if self.values else float("nan")


# ------------------------------------------------ surface operators on fields


def field_surface_derivatives(jet, normals, H, d: int):
    """grad_S and Delta_S of an ambient scalar field from its Jet2.

    The jet is taken over (x1..xd, t); only the spatial block is used.
    """
    g = jet.grad[:, :d]
    Hs = jet.hess[:, :d, :d]
    n = np.asarray(normals, float)
    gn = np.sum(g * n, axis=-1)
    grad_s = g - gn[:, None] * n
    lap_s = np.trace(Hs, axis1=1, axis2=2) - np.einsum("ni,nij,nj->n", n, Hs, n) - np.asarray(H) * gn
    return grad_s, lap_s


def _ambient_jet(u: Expr, points, t):
    d = points.shape[1]
    b = {f"x{i + 1}": points[:, i] for i in range(d)}
    b["t"] = np.full(len(points), float(t))
    return eval_jet2(u, b)


def expansion_values(lam, Z, points, spec: KernelSpec, normals=None, H=None, order=0, chunk=1024):
    """u, grad_S u and Delta_S u of the expansion sum_j lam_j Psi(., z_j)."""
    N = len(points)
    u = np.empty(N)
    gs = np.empty((N, spec.d)) if order >= 1 else None
    ls = np.empty(N) if order >= 2 else None
    for a in range(0, N, chunk):
        b = min(N, a + chunk)
        nrm = None if normals is None else normals[a:b]
        hh = None if H is None else H[a:b]
        rows = operators.analytic_rows(points[a:b], nrm, hh, Z, spec, order=order)
        u[a:b] = rows.psi @ lam
        if order >= 1:
            gs[a:b] = np.einsum("nmk,m->nk", rows.grad_s, lam)
        if order >= 2:
            ls[a:b] = rows.lap_s @ lam
    return u, gs, ls


@dataclass
class MeshGeometry:
    """A parametric quadrature mesh together with normals/curvature at t."""

    mesh: QuadratureMesh
    normals: np.ndarray
    H: np.ndarray


def parametric_mesh_geometry(surface: ParametricSurface, t: float, resolution) -> MeshGeometry:
    mesh = build_quadrature(surface, t, resolution)
    geo = surface.geometry(mesh.phi, t)
    return MeshGeometry(mesh, geo.normals(), geo.mean_curvature())


def solution_errors(lam, Z, spec: KernelSpec, u_star: Expr, t: float, mg: MeshGeometry,
                    orders=(0, 1, 2)) -> dict[int, float]:
    """L2 error (order 0) and H1/H2 seminorm errors on the mesh at time t."""
    top = max(orders)
    pts = mg.mesh.vertices
    u, gs, ls = expansion_values(lam, Z, pts, spec, mg.normals, mg.H, order=top)
    jet = _ambient_jet(u_star, pts, t)
    out = {}
    if 0 in orders:
        out[0] = l2_norm(jet.value - u, mg.mesh)
    if top >= 1:
        grad_s, lap_s = field_surface_derivatives(jet, mg.normals, mg.H, spec.d)
        if 1 in orders:
            out[1] = l2_norm(grad_s - gs, mg.mesh)
        if 2 in orders:
            out[2] = l2_norm(lap_s - ls, mg.mesh)
    return out


def seminorm_error(lam, Z, spec: KernelSpec, u_star: Expr, order: int, mg: MeshGeometry, t: float) -> float:
    if order not in (1, 2):
        raise ValueError("seminorm order must be 1 or 2")
    return solution_errors(lam, Z, spec, u_star, t, mg, orders=(order,))[order]


# ---------------------------------------------------------- manufactured f


@dataclass(frozen=True)
class ManufacturedSource:
    """f making ``u_star`` an exact solution of the evolving-surface PDE.

    consistent: f = d/dt[u*(x(phi,t),t)] + (div_S v) u* - eps Delta_S u*
    literal:    f = d/dt[u*(x(phi,t),t)] + v . grad_S u* - eps Delta_S u*
    """

    u_star: Expr
    surface: ParametricSurface
    eps: float
    form: OperatorForm = OperatorForm.CONSISTENT

    def __call__(self, phi, t: float) -> np.ndarray:
        geo = self.surface.geometry(phi, t)
        d = self.surface.d
        jet = _ambient_jet(self.u_star, geo.points, t)
        n = geo.normals()
        H = geo.mean_curvature()
        v = geo.velocity
        material = jet.grad[:, d] + np.sum(jet.grad[:, :d] * v, axis=-1)
        grad_s, lap_s = field_surface_derivatives(jet, n, H, d)
        if self.form == OperatorForm.CONSISTENT:
            first = geo.div_velocity() * jet.value
        else:
            first = np.sum(v * grad_s, axis=-1)
        return material + first - self.eps * lap_s


def manufactured_source(u_star: Expr | str, surface: ParametricSurface, eps: float,
                        form: OperatorForm = OperatorForm.CONSISTENT) -> ManufacturedSource:
    if isinstance(u_star, str):
        u_star = parse(u_star, surfaces.ambient_names(surface.d) + ["t"])
    return ManufacturedSource(u_star, surface, float(eps), OperatorForm(form))


# ---------------------------------------------------------------- monitor


@dataclass
class Monitor:
    """Per-step mass and error measurements, used as a stepper observer.

    Mass is computed on the mesh whose vertices are the collocation points X
    (``triangles`` over X, else the convex hull).  Errors need a parametric
    surface and an exact solution; they use a parametric mesh at
    ``error_resolution`` or, by default, the X mesh with exact geometry.
    """

    spec: KernelSpec
    u_star: Expr | None = None
    surface: ParametricSurface | None = None
    triangles: np.ndarray | None = None
    error_resolution: object = None
    orders: tuple[int, ...] = (0, 1, 2)
    series: dict[str, ErrorSeries] = field(default_factory=dict)

    def _mass_mesh(self, X):
        if self.triangles is not None:
            return mesh_from_elements(X, self.triangles)
        return build_quadrature(X)

    def _error_geometry(self, snap, t) -> MeshGeometry:
        if self.error_resolution is not None:
            return parametric_mesh_geometry(self.surface, t, self.error_resolution)
        geo = self.surface.geometry(snap.phi_X, t)
        mesh = mesh_from_elements(geo.points, self.triangles, snap.phi_X)
        return MeshGeometry(mesh, geo.normals(), geo.mean_curvature())

    def __call__(self, state, report=None) -> dict[str, float]:
        snap = state.snap
        out: dict[str, float] = {}
        out["mass"] = mass(state.values_X, self._mass_mesh(snap.X))
        if self.u_star is not None and self.surface is not None:
            orders = self.orders if self.spec.nu > 2 else tuple(o for o in self.orders if o < 2)
            errs = solution_errors(state.coef, snap.Z, self.spec, self.u_star, state.t,
                                   self._error_geometry(snap, state.t), orders)
            for o, name in ((0, "l2_error"), (1, "h1_error"), (2, "h2_error")):
                if o in errs:
                    out[name] = errs[o]
        for k, v in out.items():
            self.series.setdefault(k, ErrorSeries()).record(state.t, v)
        return out
