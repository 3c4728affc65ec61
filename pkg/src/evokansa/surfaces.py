"""Evolving surfaces: parametric maps x(phi, t) and point-cloud sequences."""
from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .exprdsl import Expr, eval_jet2, evaluate, parse
from .kernels import KernelSpec


class SurfaceError(ValueError):
    pass


class PoleError(SurfaceError):
    """Raised where the parametrization Jacobian loses rank."""


class SnapshotFormatError(SurfaceError):
    pass


def ambient_names(d: int) -> list[str]:
    return [f"x{i + 1}" for i in range(d)]


# ---------------------------------------------------------------- parametric


@dataclass
class SurfaceGeometry:
    """Derivatives of x(phi, t) at a batch of parameter points.

    Shapes: points/velocity (N, d), jac (N, d, q), x_pp (N, d, q, q) and
    x_pt (N, d, q) where q = d - 1 is the parameter dimension.
    """

    points: np.ndarray
    jac: np.ndarray
    velocity: np.ndarray
    x_pp: np.ndarray
    x_pt: np.ndarray
    orientation: int = 1

    @property
    def metric(self) -> np.ndarray:
        return np.einsum("nki,nkj->nij", self.jac, self.jac)

    def inverse_metric(self) -> np.ndarray:
        g = self.metric
        det = np.linalg.det(g)
        scale = np.einsum("nki,nki->n", self.jac, self.jac)
        if np.any(det <= 1e-24 * np.maximum(scale, 1.0) ** g.shape[-1]):
            raise PoleError(
                "parametrization Jacobian is rank deficient; use generate_nodes, "
                "whose half-cell offset keeps nodes off the poles"
            )
        return np.linalg.inv(g)

    def normals(self) -> np.ndarray:
        J = self.jac
        d = J.shape[1]
        if d == 2:
            n = np.stack([J[:, 1, 0], -J[:, 0, 0]], axis=-1)
        elif d == 3:
            n = np.cross(J[:, :, 0], J[:, :, 1])
        else:
            raise SurfaceError("only curves in R^2 and surfaces in R^3 are supported")
        norm = np.linalg.norm(n, axis=-1)
        ref = np.prod(np.linalg.norm(J, axis=1), axis=-1)
        if np.any(norm <= 1e-12 * np.maximum(ref, 1e-300)) or np.any(norm == 0):
            raise PoleError(
                "normal undefined where the Jacobian is rank deficient; "
                "use generate_nodes, whose half-cell offset keeps nodes off the poles"
            )
        return self.orientation * n / norm[:, None]

    def mean_curvature(self) -> np.ndarray:
        """Sum of principal curvatures; +2/R on a sphere with outward normals."""
        ginv = self.inverse_metric()
        n = self.normals()
        second = np.einsum("nk,nkij->nij", n, self.x_pp)
        return -np.einsum("nij,nij->n", ginv, second)

    def div_velocity(self) -> np.ndarray:
        ginv = self.inverse_metric()
        dv_dx = np.einsum("nki,nkj->nij", self.x_pt, self.jac)
        return np.einsum("nij,nij->n", ginv, dv_dx)


@dataclass(frozen=True)
class ParametricSurface:
    """x(phi, t) given componentwise by expressions over ``params + ('t',)``."""

    components: tuple[Expr, ...]
    params: tuple[str, ...]
    box: tuple[tuple[float, float], ...]
    periodic: tuple[bool, ...]
    orientation: int = 1
    name: str = ""

    def __post_init__(self):
        d = len(self.components)
        if d not in (2, 3):
            raise SurfaceError("surface must live in R^2 or R^3")
        if len(self.params) != d - 1 or len(self.box) != d - 1 or len(self.periodic) != d - 1:
            raise SurfaceError(f"a surface in R^{d} needs {d - 1} parameter axes")
        if self.orientation not in (1, -1):
            raise SurfaceError("orientation must be +1 or -1")
        for lo, hi in self.box:
            if not hi > lo:
                raise SurfaceError("parameter box must have positive extent")

    @classmethod
    def from_strings(
        cls,
        components: Sequence[str],
        params: Sequence[str],
        box: Sequence[tuple[float, float]],
        periodic: Sequence[bool],
        orientation: int = 1,
        name: str = "",
    ) -> "ParametricSurface":
        names = list(params) + ["t"]
        exprs = tuple(parse(c, names) for c in components)
        return cls(
            exprs,
            tuple(params),
            tuple((float(a), float(b)) for a, b in box),
            tuple(bool(p) for p in periodic),
            orientation,
            name,
        )

    @property
    def d(self) -> int:
        return len(self.components)

    @property
    def q(self) -> int:
        return self.d - 1

    def _bindings(self, phi, t) -> dict:
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if phi.shape[-1] != self.q:
            phi = phi.reshape(-1, self.q)
        b = {name: phi[:, i] for i, name in enumerate(self.params)}
        b["t"] = np.full(phi.shape[0], float(t))
        return b

    def points(self, phi, t) -> np.ndarray:
        b = self._bindings(phi, t)
        n = len(b["t"])
        return np.stack([np.broadcast_to(evaluate(c, b), (n,)) for c in self.components], axis=-1)

    def geometry(self, phi, t) -> SurfaceGeometry:
        b = self._bindings(phi, t)
        q = self.q
        jets = [eval_jet2(c, b) for c in self.components]
        pts = np.stack([j.value for j in jets], axis=-1)
        grad = np.stack([j.grad for j in jets], axis=1)  # (N, d, q+1)
        hess = np.stack([j.hess for j in jets], axis=1)  # (N, d, q+1, q+1)
        return SurfaceGeometry(
            points=pts,
            jac=grad[:, :, :q],
            velocity=grad[:, :, q],
            x_pp=hess[:, :, :q, :q],
            x_pt=hess[:, :, :q, q],
            orientation=self.orientation,
        )

    def axis_lengths(self, t: float, samples: int = 64) -> np.ndarray:
        """Longest coordinate-line arc length along each parameter axis."""
        axes = []
        for i, ((lo, hi), per) in enumerate(zip(self.box, self.periodic)):
            axes.append(_axis_points(lo, hi, per, samples))
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.q)
        J = self.geometry(mesh, t).jac
        out = []
        for i, (lo, hi) in enumerate(self.box):
            speed = np.linalg.norm(J[:, :, i], axis=-1).reshape([samples] * self.q)
            per_line = np.moveaxis(speed, i, -1).mean(axis=-1) * (hi - lo)
            out.append(float(np.max(per_line)))
        return np.array(out)


def velocity(s: ParametricSurface, phi, t) -> np.ndarray:
    return s.geometry(phi, t).velocity


def analytic_normal(s: ParametricSurface, phi, t) -> np.ndarray:
    return s.geometry(phi, t).normals()


def mean_curvature_sum(s: ParametricSurface, phi, t) -> np.ndarray:
    return s.geometry(phi, t).mean_curvature()


# ------------------------------------------------------------------- nodes


def _axis_points(lo: float, hi: float, periodic: bool, n: int) -> np.ndarray:
    step = (hi - lo) / n
    if periodic:
        return lo + step * np.arange(n)
    # half-cell offset keeps nodes off degenerate (polar) boundaries
    return lo + step * (np.arange(n) + 0.5)


def parameter_grid(s: ParametricSurface, counts: Sequence[int]) -> np.ndarray:
    axes = [_axis_points(lo, hi, per, int(n)) for (lo, hi), per, n in zip(s.box, s.periodic, counts)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, s.q)


def grid_counts(s: ParametricSurface, t: float, target_h=None, target_n=None) -> tuple[int, ...]:
    lengths = s.axis_lengths(t)
    if target_n is not None:
        if s.q == 1:
            return (int(target_n),)
        unit = (np.prod(lengths) / float(target_n)) ** (1.0 / s.q)
        return tuple(max(1, int(round(L / unit))) for L in lengths)
    if target_h is None or target_h <= 0:
        raise SurfaceError("need a positive target_h or target_n")
    return tuple(max(1, int(round(L / target_h))) for L in lengths)


def _scaled_counts(counts, ratio: float) -> tuple[int, ...]:
    f = ratio ** (1.0 / len(counts))
    return tuple(max(1, int(round(c * f))) for c in counts)


@dataclass
class CollocationSet:
    """Trial centers Z and collocation points X on one surface snapshot."""

    Z: np.ndarray
    X: np.ndarray
    phi_Z: np.ndarray | None = None
    phi_X: np.ndarray | None = None
    counts_Z: tuple[int, ...] | None = None
    counts_X: tuple[int, ...] | None = None
    h_Z: float = float("nan")
    h_X: float = float("nan")
    x_is_z: bool = False

    def __post_init__(self):
        if len(self.X) < len(self.Z):
            raise SurfaceError("need at least as many collocation points as centers")

    @property
    def n_Z(self) -> int:
        return len(self.Z)

    @property
    def n_X(self) -> int:
        return len(self.X)


def generate_nodes(
    s: ParametricSurface,
    t: float = 0.0,
    target_h: float | None = None,
    target_n: int | None = None,
    oversample_ratio: float = 1.0,
    n_x: int | None = None,
    with_fill: bool = True,
) -> CollocationSet:
    """Tensor-grid nodes in parameter space mapped onto the surface at time t."""
    if oversample_ratio < 1:
        raise SurfaceError("oversample_ratio must be >= 1")
    if target_n is not None and target_n <= 0:
        raise SurfaceError("target_n must be positive")
    cz = grid_counts(s, t, target_h, target_n)
    if n_x is not None:
        cx = (int(n_x),) if s.q == 1 else _scaled_counts(cz, n_x / float(np.prod(cz)))
    elif oversample_ratio == 1:
        cx = cz
    else:
        cx = _scaled_counts(cz, oversample_ratio)
    if np.prod(cz) < s.d + 1:
        raise SurfaceError(f"need at least {s.d + 1} trial centers, got {int(np.prod(cz))}")
    phi_Z = parameter_grid(s, cz)
    same = tuple(cx) == tuple(cz)
    phi_X = phi_Z if same else parameter_grid(s, cx)
    Z = s.points(phi_Z, t)
    X = Z if same else s.points(phi_X, t)
    cs = CollocationSet(Z, X, phi_Z, phi_X, tuple(cz), tuple(cx), x_is_z=same)
    if with_fill:
        cs.h_Z = parametric_fill_distance(s, Z, t)
        cs.h_X = cs.h_Z if same else parametric_fill_distance(s, X, t)
    return cs


def dense_probe(s: ParametricSurface, t: float, n_points: int, factor: int = 20) -> np.ndarray:
    target = factor * max(n_points, 1)
    cz = grid_counts(s, t, target_n=target)
    while np.prod(cz) < target:
        cz = tuple(c + 1 for c in cz)
    return s.points(parameter_grid(s, cz), t)


def fill_distance(points, probe) -> float:
    """max over probe points of the chordal distance to the nearest point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    probe = np.atleast_2d(np.asarray(probe, dtype=float))
    if len(points) == 0 or len(probe) == 0:
        raise SurfaceError("fill distance of an empty set")
    if len(probe) < 20 * len(points):
        raise SurfaceError("probe set must hold at least 20x the number of points")
    dist, _ = cKDTree(points).query(probe, k=1)
    return float(np.max(dist))


def parametric_fill_distance(s: ParametricSurface, points, t: float) -> float:
    return fill_distance(points, dense_probe(s, t, len(points)))


# --------------------------------------------------------------- triangles


def grid_triangles(counts: Sequence[int], periodic: Sequence[bool]) -> np.ndarray:
    """Connectivity of a parameter grid: segments (q=1) or triangles (q=2).

    Non-periodic ends of a 2D grid are closed with fans, which is where a
    closed surface such as a sphere pinches to its poles.
    """
    if len(counts) == 1:
        n = counts[0]
        j = np.arange(n)
        if periodic[0]:
            return np.stack([j, (j + 1) % n], axis=-1)
        return np.stack([j[:-1], j[1:]], axis=-1)
    n0, n1 = counts
    p0, p1 = periodic
    idx = np.arange(n0 * n1).reshape(n0, n1)
    tris = []
    r0 = n0 if p0 else n0 - 1
    r1 = n1 if p1 else n1 - 1
    for i in range(r0):
        for j in range(r1):
            a = idx[i, j]
            b = idx[(i + 1) % n0, j]
            c = idx[(i + 1) % n0, (j + 1) % n1]
            e = idx[i, (j + 1) % n1]
            tris.append((a, b, c))
            tris.append((a, c, e))
    if not p0 and p1:
        for ring in (idx[0, :], idx[-1, :]):
            for j in range(1, n1 - 1):
                tris.append((ring[0], ring[j], ring[j + 1]))
    if not p1 and p0:
        for ring in (idx[:, 0], idx[:, -1]):
            for i in range(1, n0 - 1):
                tris.append((ring[0], ring[i], ring[i + 1]))
    return np.asarray(tris, dtype=int)


# -------------------------------------------------------------- point clouds


@dataclass
class PointCloudFrame:
    t: float
    points: np.ndarray
    velocities: np.ndarray | None = None
    triangles: np.ndarray | None = None
    values: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        K, d = self.points.shape
        if K < d + 1:
            raise SurfaceError(f"a cloud in R^{d} needs at least {d + 1} points, got {K}")
        if cKDTree(self.points).query_pairs(1e-12):
            raise SurfaceError("cloud contains duplicate points")
        if self.velocities is not None:
            self.velocities = np.asarray(self.velocities, dtype=float).reshape(K, d)
        if self.triangles is not None:
            self.triangles = np.asarray(self.triangles, dtype=int)

    @property
    def d(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class AmbientField:
    """Expressions over ambient coordinates x1..xd and time t."""

    components: tuple[Expr, ...]
    d: int

    @classmethod
    def from_strings(cls, components: Sequence[str], d: int) -> "AmbientField":
        names = ambient_names(d) + ["t"]
        return cls(tuple(parse(c, names) for c in components), d)

    def _bindings(self, points, t):
        points = np.atleast_2d(points)
        b = {name: points[:, i] for i, name in enumerate(ambient_names(self.d))}
        b["t"] = np.full(len(points), float(t))
        return b

    def __call__(self, points, t) -> np.ndarray:
        b = self._bindings(points, t)
        n = len(b["t"])
        vals = [np.broadcast_to(evaluate(c, b), (n,)) for c in self.components]
        return np.stack(vals, axis=-1)

    def jets(self, points, t):
        b = self._bindings(points, t)
        return [eval_jet2(c, b) for c in self.components]

    def jacobian(self, points, t) -> np.ndarray:
        """(N, m, d) spatial Jacobian of the m components."""
        return np.stack([j.grad[:, : self.d] for j in self.jets(points, t)], axis=1)


def advect(points, v: Callable | np.ndarray, t: float, dt: float) -> np.ndarray:
    """Forward Euler particle update x + v(x, t) dt."""
    if dt <= 0:
        raise SurfaceError("time step must be positive")
    points = np.asarray(points, dtype=float)
    vel = v(points, t) if callable(v) else np.asarray(v, dtype=float)
    return points + vel * dt


def decompose_velocity(v, n) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    vn = np.sum(v * n, axis=-1, keepdims=True) * n
    return vn, v - vn


# --------------------------------------------------------- normal estimation


def _raw_normals(cloud: np.ndarray, queries: np.ndarray, k: int, spec: KernelSpec) -> np.ndarray:
    kernels.require_order(spec, 1)
    k = min(k, len(cloud))
    tree = cKDTree(cloud)
    _, idx = tree.query(queries, k=k)
    idx = np.atleast_2d(idx).reshape(len(queries), k)
    Zk = cloud[idx]  # (Q, k, d)
    diff_zz = Zk[:, :, None, :] - Zk[:, None, :, :]
    r_zz = np.linalg.norm(diff_zz, axis=-1)
    G = kernels.profile(spec).phi(r_zz / spec.scale)
    try:
        coef = np.linalg.solve(G, np.ones(G.shape[:2])[..., None])[..., 0]
    except np.linalg.LinAlgError:
        cond = float(np.max(np.linalg.cond(G)))
        raise kernels.GramFactorizationError("local Gram matrix is singular", cond) from None
    diff = queries[:, None, :] - Zk
    g1 = kernels._g1_ambient(spec, np.linalg.norm(diff, axis=-1))
    grad = np.einsum("qk,qk,qkd->qd", coef, g1, diff)
    norm = np.linalg.norm(grad, axis=-1)
    if np.any(norm <= 1e-14 * np.max(np.abs(coef), axis=-1)):
        raise SurfaceError("interpolant gradient vanishes; normal undefined")
    return grad / norm[:, None]


def estimate_normal(cloud: PointCloudFrame | np.ndarray, query, k: int | None = None,
                    spec: KernelSpec | None = None) -> np.ndarray:
    """Normal from the gradient of the local interpolant of the constant 1.

    Sign: pointing away from the cloud centroid.
    """
    pts = cloud.points if isinstance(cloud, PointCloudFrame) else np.asarray(cloud, float)
    spec = spec or KernelSpec(mu=4.0, d=pts.shape[1])
    k = k or min(20, len(pts))
    q = np.atleast_2d(np.asarray(query, dtype=float))
    n = _raw_normals(pts, q, k, spec)[0]
    if np.dot(n, q[0] - pts.mean(axis=0)) < 0:
        n = -n
    return n


def orient_normals(points: np.ndarray, normals: np.ndarray, k: int = 10) -> np.ndarray:
    """Consistent orientation: seed outward from the centroid, then BFS over k-NN."""
    points = np.asarray(points, float)
    normals = np.array(normals, dtype=float, copy=True)
    N = len(points)
    k = min(k + 1, N)
    _, nbrs = cKDTree(points).query(points, k=k)
    adj = [set() for _ in range(N)]
    for i in range(N):
        for j in np.atleast_1d(nbrs[i])[1:]:
            adj[i].add(int(j))
            adj[int(j)].add(i)
    centroid = points.mean(axis=0)
    seen = np.zeros(N, dtype=bool)
    dist = np.linalg.norm(points - centroid, axis=-1)
    for seed in np.argsort(-dist):
        if seen[seed]:
            continue
        if np.dot(normals[seed], points[seed] - centroid) < 0:
            normals[seed] = -normals[seed]
        seen[seed] = True
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            for j in sorted(adj[i]):
                if not seen[j]:
                    if np.dot(normals[j], normals[i]) < 0:
                        normals[j] = -normals[j]
                    seen[j] = True
                    queue.append(j)
    return normals


def estimate_normals(cloud: np.ndarray, queries: np.ndarray | None = None, k: int | None = None,
                     spec: KernelSpec | None = None) -> np.ndarray:
    """Batch estimation with the k-NN orientation sweep over the query set."""
    cloud = np.asarray(cloud, float)
    queries = cloud if queries is None else np.atleast_2d(np.asarray(queries, float))
    spec = spec or KernelSpec(mu=4.0, d=cloud.shape[1])
    k = k or min(20, len(cloud))
    raw = _raw_normals(cloud, queries, k, spec)
    return orient_normals(queries, raw, k=min(10, len(queries) - 1) if len(queries) > 1 else 1)


# ----------------------------------------------------------------- snapshots


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_snapshot(path, frame: PointCloudFrame, values=None) -> None:
    values = frame.values if values is None else values
    K, d = frame.points.shape
    lines = [f"# t={_fmt(frame.t)} d={d} K={K}"]
    cols = [frame.points]
    if values is not None:
        cols.append(np.asarray(values, float).reshape(K, -1))
    table = np.hstack(cols)
    lines += [" ".join(_fmt(v) for v in row) for row in table]
    if frame.triangles is not None:
        lines.append(f"# triangles={len(frame.triangles)}")
        lines += [" ".join(str(int(i)) for i in tri) for tri in frame.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_header(line: str, path) -> dict:
    if not line.startswith("#"):
        raise SnapshotFormatError(f"{path}: missing '# t=... d=... K=...' header")
    fields = {}
    for tok in line[1:].split():
        if "=" not in tok:
            raise SnapshotFormatError(f"{path}: malformed header token {tok!r}")
        key, val = tok.split("=", 1)
        fields[key] = val
    for key in ("t", "d", "K"):
        if key not in fields:
            raise SnapshotFormatError(f"{path}: header lacks {key}=")
    try:
        return {"t": float(fields["t"]), "d": int(fields["d"]), "K": int(fields["K"])}
    except ValueError:
        raise SnapshotFormatError(f"{path}: header values not numeric") from None


def read_snapshot(path, expect_d: int | None = None) -> PointCloudFrame:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise SnapshotFormatError(f"{path}: empty file")
    head = _parse_header(lines[0], path)
    d, K = head["d"], head["K"]
    if expect_d is not None and d != expect_d:
        raise SnapshotFormatError(f"{path}: dimension {d} does not match {expect_d}")
    body = lines[1 : 1 + K]
    if len(body) < K or any(ln.startswith("#") for ln in body):
        raise SnapshotFormatError(f"{path}: expected {K} point rows")
    try:
        table = np.array([[float(v) for v in ln.split()] for ln in body])
    except ValueError:
        raise SnapshotFormatError(f"{path}: non-numeric point row") from None
    if table.ndim != 2 or table.shape[1] < d:
        raise SnapshotFormatError(f"{path}: rows must hold at least {d} values")
    rest = lines[1 + K :]
    tris = None
    if rest:
        if not rest[0].startswith("# triangles="):
            raise SnapshotFormatError(f"{path}: unexpected content after point rows")
        m = int(rest[0].split("=", 1)[1])
        rows = rest[1 : 1 + m]
        if len(rows) != m:
            raise SnapshotFormatError(f"{path}: expected {m} triangle rows")
        tris = np.array([[int(v) for v in ln.split()] for ln in rows], dtype=int).reshape(m, -1)
    values = table[:, d:] if table.shape[1] > d else None
    if values is not None and values.shape[1] == 1:
        values = values[:, 0]
    return PointCloudFrame(head["t"], table[:, :d], triangles=tris, values=values)


def load_pointcloud_sequence(path) -> list[PointCloudFrame]:
    """Frames from a directory (file-name order) or a list of files.

    Times must increase strictly in that order; all frames share one d.
    """
    if isinstance(path, (str, os.PathLike)) and Path(path).is_dir():
        files = sorted(p for p in Path(path).iterdir() if p.is_file() and not p.name.startswith("."))
    elif isinstance(path, (str, os.PathLike)):
        files = [Path(path)]
    else:
        files = [Path(p) for p in path]
    if not files:
        raise SnapshotFormatError(f"no snapshot files in {path}")
    frames = []
    d = None
    for f in files:
        fr = read_snapshot(f, expect_d=d)
        d = fr.d
        if frames and not fr.t > frames[-1].t:
            raise SnapshotFormatError(f"{f}: time {fr.t} does not follow {frames[-1].t}")
        frames.append(fr)
    return frames
