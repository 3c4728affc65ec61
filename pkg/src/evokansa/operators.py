"""Surface differential operators applied to kernel expansions.

Two families:

* analytic rows for parametric surfaces, where the normal and the curvature
  sum are known exactly and Delta_S Psi follows from the ambient identity
  ``tr(H) - n^T H n - H_mean (n . grad)``;
* pseudospectral matrices built from the row functions
  ``G_k(x, Z) = p_k(x)^T grad Psi(x, Z) Psi(Z, Z)^{-1}`` for point clouds.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .kernels import GramFactor, KernelSpec


class OperatorForm(str, enum.Enum):
    """Which first-order part A^m carries.

    ``consistent``: A u = (div_S v) u - eps Delta_S u, matching the PDE once the
    material derivative is discretised along particle paths.
    ``literal``: A u = v . grad_S u - eps Delta_S u.
    """

    CONSISTENT = "consistent"
    LITERAL = "literal"


class OperatorError(ValueError):
    pass


def projection(normals) -> np.ndarray:
    n = np.atleast_2d(np.asarray(normals, dtype=float))
    return np.eye(n.shape[-1]) - n[..., :, None] * n[..., None, :]


# ------------------------------------------------------------ analytic rows


def surface_gradient_kernel(x, normal_at_x, z, spec: KernelSpec) -> np.ndarray:
    grad = kernels.kernel_gradient_x(spec, x, z)
    n = np.asarray(normal_at_x, dtype=float)
    return grad - np.sum(grad * n, axis=-1, keepdims=True) * n


def surface_laplacian_kernel_analytic(x, n, H, z, spec: KernelSpec) -> np.ndarray:
    hess = kernels.kernel_hessian_x(spec, x, z)
    grad = kernels.kernel_gradient_x(spec, x, z)
    n = np.asarray(n, dtype=float)
    tr = np.trace(hess, axis1=-2, axis2=-1)
    nhn = np.einsum("...i,...ij,...j->...", n, hess, n)
    return tr - nhn - np.asarray(H) * np.sum(n * grad, axis=-1)


@dataclass
class AnalyticRows:
    """Psi, grad_S Psi and Delta_S Psi for every (x_i, z_j)."""

    psi: np.ndarray  # (N, M)
    grad_s: np.ndarray | None  # (N, M, d)
    lap_s: np.ndarray | None  # (N, M)


def analytic_rows(X, normals, H, Z, spec: KernelSpec, order: int = 2) -> AnalyticRows:
    """Vectorised analytic surface derivatives of Psi(., z_j) at x_i.

    With r = x - z: Delta_S Psi = (d-1) g1 + g2 (|r|^2 - (n.r)^2) - H g1 (n.r).
    """
    if order == 0:
        return AnalyticRows(kernels.gram(spec, X, Z), None, None)
    pd = kernels.pair_derivatives(spec, X, Z, order=order)
    n = np.asarray(normals, dtype=float)
    nr = np.einsum("nmk,nk->nm", pd.diff, n)
    grad_s = pd.g1[..., None] * (pd.diff - nr[..., None] * n[:, None, :])
    lap = None
    if order >= 2:
        d = spec.d
        r2 = np.einsum("nmk,nmk->nm", pd.diff, pd.diff)
        lap = (d - 1) * pd.g1 + pd.g2 * (r2 - nr**2) - np.asarray(H)[:, None] * pd.g1 * nr
    return AnalyticRows(pd.phi, grad_s, lap)


def surface_divergence_velocity(s, phi, t) -> np.ndarray:
    """div_S v for the parametric velocity dx/dt, by automatic differentiation."""
    return s.geometry(phi, t).div_velocity()


def surface_divergence_field(jacobian, normals) -> np.ndarray:
    """div_S v = tr(J) - n^T J n for an ambient field with Jacobian J."""
    J = np.asarray(jacobian, dtype=float)
    n = np.asarray(normals, dtype=float)
    return np.trace(J, axis1=-2, axis2=-1) - np.einsum("ni,nij,nj->n", n, J, n)


# -------------------------------------------------------- discrete operators


@dataclass
class DiscreteOperator:
    matrix: np.ndarray
    kind: str
    n_eval: int
    factorizations: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def shape(self):
        return self.matrix.shape


def factor_gram(spec: KernelSpec, centers) -> GramFactor:
    return kernels.factorize(kernels.gram(spec, centers, centers))


def build_gk(eval_points, centers, normals_at_eval, spec: KernelSpec,
             factor: GramFactor | None = None) -> tuple[list[np.ndarray], GramFactor]:
    """Row functions G_k(x_i, Z) for k = 1..d, one (n_eval, n_Z) matrix each."""
    X = np.atleast_2d(np.asarray(eval_points, dtype=float))
    Z = np.atleast_2d(np.asarray(centers, dtype=float))
    if factor is None:
        factor = factor_gram(spec, Z)
    pd = kernels.pair_derivatives(spec, X, Z, order=1)
    grad = pd.gradient  # (N, M, d)
    P = projection(normals_at_eval)  # (N, d, d)
    D = np.einsum("nlk,nml->knm", P, grad)  # (d, N, M): p_k . grad Psi
    G = []
    for k in range(spec.d):
        # D_k Psi^{-1} = (Psi^{-1} D_k^T)^T, Psi symmetric
        G.append(factor.solve(D[k].T).T)
    return G, factor


def gradient_operator(X, Z, normals_X, spec, factor=None) -> list[DiscreteOperator]:
    G, factor = build_gk(X, Z, normals_X, spec, factor)
    return [DiscreteOperator(g, f"gradient_{k + 1}", len(X), [("Z", factor.n, factor.jitter)])
            for k, g in enumerate(G)]


def discrete_laplacian_a(X, Z, normals_X, normals_Z, spec: KernelSpec,
                         factor_Z: GramFactor | None = None,
                         G_XZ: list[np.ndarray] | None = None) -> DiscreteOperator:
    """sum_k G_k(X, Z) G_k(Z, Z)."""
    if factor_Z is None:
        factor_Z = factor_gram(spec, Z)
    if G_XZ is None:
        G_XZ, _ = build_gk(X, Z, normals_X, spec, factor_Z)
    G_ZZ, _ = build_gk(Z, Z, normals_Z, spec, factor_Z)
    L = sum(gx @ gz for gx, gz in zip(G_XZ, G_ZZ))
    return DiscreteOperator(L, "laplacian_a", len(X), [("Z", factor_Z.n, factor_Z.jitter)])


def discrete_laplacian_b(X, Z, normals_X, spec: KernelSpec,
                         factor_Z: GramFactor | None = None,
                         G_XZ: list[np.ndarray] | None = None) -> DiscreteOperator:
    """sum_k G_k(X, X) G_k(X, Z): the outer derivative uses X as its centers."""
    if factor_Z is None:
        factor_Z = factor_gram(spec, Z)
    if G_XZ is None:
        G_XZ, _ = build_gk(X, Z, normals_X, spec, factor_Z)
    G_XX, factor_X = build_gk(X, X, normals_X, spec)
    L = sum(gxx @ gxz for gxx, gxz in zip(G_XX, G_XZ))
    facts = [("X", factor_X.n, factor_X.jitter), ("Z", factor_Z.n, factor_Z.jitter)]
    return DiscreteOperator(L, "laplacian_b", len(X), facts)


# ----------------------------------------------------------------- systems


@dataclass
class SurfaceData:
    """Per-snapshot geometry needed to assemble A^m at the collocation points."""

    X: np.ndarray
    Z: np.ndarray
    normals_X: np.ndarray
    normals_Z: np.ndarray | None = None
    H_X: np.ndarray | None = None
    divv_X: np.ndarray | None = None
    vel_X: np.ndarray | None = None
    x_is_z: bool = False


@dataclass
class OperatorSystem:
    """Matrices on one snapshot.

    ``nodal`` systems act on u|Z (pseudospectral path); otherwise on the
    kernel coefficients.  ``base`` evaluates the expansion at X and ``A``
    applies A^m there.
    """

    base: np.ndarray
    A: np.ndarray
    nodal: bool
    factor_Z: GramFactor | None = None
    factorizations: list[tuple[str, int, float]] = field(default_factory=list)

    def lhs(self, theta: float, dt: float) -> np.ndarray:
        return assemble_Lm(self.base, self.A, theta, dt)


def assemble_Lm(base: np.ndarray, A: np.ndarray, theta: float, dt: float) -> np.ndarray:
    """L^m = base + (1 - theta) dt A^m, an n_X x n_Z matrix."""
    return base + (1.0 - theta) * dt * A


def _first_order_part(data: SurfaceData, form: OperatorForm):
    if form == OperatorForm.CONSISTENT:
        if data.divv_X is None:
            raise OperatorError("consistent form needs div_S v at the collocation points")
        return np.asarray(data.divv_X, float)
    if data.vel_X is None:
        raise OperatorError("literal form needs the velocity at the collocation points")
    return np.asarray(data.vel_X, float)


def analytic_system(data: SurfaceData, eps: float, form: OperatorForm, spec: KernelSpec) -> OperatorSystem:
    """Coefficient-space matrices Psi(X, Z) and (A^m Psi)(X, Z)."""
    need_lap = eps != 0
    if need_lap and data.H_X is None:
        raise OperatorError("analytic Laplacian needs the curvature sum at X")
    first = _first_order_part(data, form)
    order = 2 if need_lap else (1 if form == OperatorForm.LITERAL else 0)
    rows = analytic_rows(data.X, data.normals_X, data.H_X, data.Z, spec, order=order)
    if form == OperatorForm.CONSISTENT:
        A = first[:, None] * rows.psi
    else:
        A = np.einsum("nmk,nk->nm", rows.grad_s, first)
    if need_lap:
        A = A - eps * rows.lap_s
    return OperatorSystem(rows.psi, A, nodal=False)


def discrete_system(data: SurfaceData, eps: float, form: OperatorForm, spec: KernelSpec,
                    variant: str = "a") -> OperatorSystem:
    """Nodal-space matrices E = Psi(X,Z)Psi(Z,Z)^{-1} and A^m built from G_k."""
    factor_Z = factor_gram(spec, data.Z)
    if data.x_is_z:
        E = np.eye(len(data.Z))
    else:
        E = factor_Z.solve(kernels.gram(spec, data.Z, data.X)).T
    first = _first_order_part(data, form)
    need_grad = eps != 0 or form == OperatorForm.LITERAL
    G_XZ = build_gk(data.X, data.Z, data.normals_X, spec, factor_Z)[0] if need_grad else None
    facts = [("Z", factor_Z.n, factor_Z.jitter)]
    if form == OperatorForm.CONSISTENT:
        A = first[:, None] * E
    else:
        A = sum(first[:, k][:, None] * G_XZ[k] for k in range(spec.d))
    if eps != 0:
        if variant == "a":
            if data.normals_Z is None:
                raise OperatorError("variant a needs normals at Z")
            lap = discrete_laplacian_a(data.X, data.Z, data.normals_X, data.normals_Z, spec, factor_Z, G_XZ)
        elif variant == "b":
            if data.x_is_z:
                lap = discrete_laplacian_a(data.X, data.Z, data.normals_X, data.normals_X, spec, factor_Z, G_XZ)
                lap.factorizations.insert(0, ("X", factor_Z.n, factor_Z.jitter))
            else:
                lap = discrete_laplacian_b(data.X, data.Z, data.normals_X, spec, factor_Z, G_XZ)
        else:
            raise OperatorError(f"unknown Laplacian variant {variant!r}")
        A = A - eps * lap.matrix
        facts = lap.factorizations
    return OperatorSystem(E, A, nodal=True, factor_Z=factor_Z, factorizations=facts)
