"""Built-in oracle suites: normals, operators, kernels."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels, operators, surfaces
from .exprdsl import eval_jet2, evaluate, parse
from .kernels import KernelSpec


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: {self.value:.3e} (threshold {self.threshold:.1e})"


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """Near-uniform deterministic points on a sphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def normal_angle_error(n: int = 1000, k: int = 20) -> float:
    """Max angle (degrees) between estimated and exact sphere normals."""
    P = fibonacci_sphere(n)
    est = surfaces.estimate_normals(P, k=k)
    cos = np.clip(np.sum(est * P, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.max(np.arccos(cos))))


def laplacian_x3_error(n: int, mu: float = 4.0, estimated: bool = True) -> float:
    """Relative l2 error of the pseudospectral Laplacian applied to x3 on the unit sphere."""
    Z = fibonacci_sphere(n)
    spec = KernelSpec(mu, 3)
    nrm = surfaces.estimate_normals(Z) if estimated else Z.copy()
    L = operators.discrete_laplacian_a(Z, Z, nrm, nrm, spec).matrix
    approx = L @ Z[:, 2]
    exact = -2.0 * Z[:, 2]
    return float(np.linalg.norm(approx - exact) / np.linalg.norm(exact))


def variants_agree(n: int = 200, mu: float = 4.0) -> bool:
    Z = fibonacci_sphere(n)
    spec = KernelSpec(mu, 3)
    a = operators.discrete_laplacian_a(Z, Z, Z, Z, spec).matrix
    b = operators.discrete_laplacian_b(Z, Z, Z, spec).matrix
    return bool(np.array_equal(a, b))


def bessel_path_error() -> float:
    s = np.concatenate([[0.0], np.logspace(-8, 2, 400)])
    worst = 0.0
    for n in range(4):
        a = n + 0.5
        closed = kernels._m_half(n, s)
        generic = kernels.bessel_path(a, s)
        worst = max(worst, float(np.max(np.abs(closed - generic) / np.abs(closed))))
    return worst


_AD_CASES = (
    ("sin(x)*exp(y/3) + x^3*y", ("x", "y")),
    ("sqrt(1 + 0.25*sin(2*pi*t))*cos(x)", ("x", "t")),
    ("log(2 + x^2)/(1 + y^2) - tan(0.3*x*y)", ("x", "y")),
    ("exp(t/5)*sin(x)*cos(y)", ("x", "y", "t")),
)


def ad_fd_error(step: float = 1e-5, seed: int = 7) -> float:
    """Max relative gap between AD derivatives and central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for text, names in _AD_CASES:
        e = parse(text, list(names))
        for _ in range(5):
            pt = rng.uniform(-1.0, 1.0, len(names))
            b = {v: np.float64(pt[i]) for i, v in enumerate(names)}
            jet = eval_jet2(e, b)
            g = np.atleast_1d(jet.grad)
            Hm = np.atleast_2d(jet.hess)
            fd_g = np.empty(len(names))
            fd_h = np.empty((len(names), len(names)))
            for i, v in enumerate(names):
                bp, bm = dict(b), dict(b)
                bp[v] = b[v] + step
                bm[v] = b[v] - step
                fd_g[i] = (evaluate(e, bp) - evaluate(e, bm)) / (2 * step)
                gp = np.atleast_1d(eval_jet2(e, bp).grad)
                gm = np.atleast_1d(eval_jet2(e, bm).grad)
                fd_h[i] = (gp - gm) / (2 * step)
            scale_g = max(1.0, float(np.max(np.abs(g))))
            scale_h = max(1.0, float(np.max(np.abs(Hm))))
            worst = max(worst, float(np.max(np.abs(g - fd_g))) / scale_g,
                        float(np.max(np.abs(Hm - fd_h))) / scale_h)
    return worst


def run_suite(name: str) -> list[CheckResult]:
    if name == "normals":
        err = normal_angle_error(1000)
        return [CheckResult("max normal angle on 1000-point sphere [deg]", err, 1.0, err <= 1.0)]
    if name == "operators":
        errs = [laplacian_x3_error(n) for n in (250, 500, 1000)]
        out = [CheckResult("Laplacian of x3 relative error, n=500", errs[1], 5e-2, errs[1] <= 5e-2)]
        dec = errs[0] > errs[1] > errs[2]
        out.append(CheckResult("error decreasing over n=250,500,1000 (last value)", errs[2],
                               errs[1], dec))
        same = variants_agree()
        out.append(CheckResult("variant a equals variant b when X=Z (mismatch flag)",
                               0.0 if same else 1.0, 0.0, same))
        return out
    if name == "kernels":
        eb = bessel_path_error()
        ead = ad_fd_error()
        return [CheckResult("half-integer vs Bessel path, max relative gap", eb, 1e-10, eb <= 1e-10),
                CheckResult("AD vs central differences, max relative gap", ead, 1e-6, ead <= 1e-6)]
    raise ValueError(f"unknown check suite {name!r}")
