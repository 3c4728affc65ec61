"""Whittle-Matern-Sobolev kernels and their ambient derivatives.

The kernel of Sobolev order ``mu`` in R^d is the Matern function with index
``nu = mu - d/2``::

    phi(s) = s^nu K_nu(s) / lim_{s->0} s^nu K_nu(s),     s = r / scale

Writing ``M_a(s) = s^a K_a(s)``, the identity d/ds M_a = -s M_{a-1} gives the
radial derivative factors without cancellation::

    g1 = phi'(s)/s                  = -M_{nu-1}(s) / M_nu(0)
    g2 = (phi''(s) - phi'(s)/s)/s^2 =  M_{nu-2}(s) / M_nu(0)

so that grad_x Psi = g1 (x-z)/l^2 and Hess_x Psi = g1/l^2 I + g2/l^4 (x-z)(x-z)^T.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy import special

SMALL_S = 1e-4
_SERIES_TERMS = 6


class KernelError(ValueError):
    pass


class SmoothnessError(KernelError):
    """Kernel is not smooth enough for the requested derivative."""


class GramFactorizationError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition


@dataclass(frozen=True)
class KernelSpec:
    mu: float
    d: int
    scale: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise KernelError("ambient dimension must be positive")
        if self.scale <= 0:
            raise KernelError("length scale must be positive")
        if not self.mu > (self.d - 1) / 2:
            raise KernelError(f"smoothness order mu={self.mu} must exceed (d-1)/2")
        if self.nu <= 0:
            raise KernelError(f"Matern index nu = mu - d/2 = {self.nu} must be positive")

    @property
    def nu(self) -> float:
        return self.mu - self.d / 2.0


# ------------------------------------------------------------ s^a K_a(s)


def _half_integer(a: float) -> int | None:
    n = a - 0.5
    if abs(n - round(n)) < 1e-14:
        return int(round(n))
    return None


def _is_integer(a: float) -> bool:
    return abs(a - round(a)) < 1e-14


def _m_half(n: int, s: np.ndarray) -> np.ndarray:
    """M_{n+1/2}(s) for n >= 0: sqrt(pi/2) e^-s sum_k c_k s^(n-k)."""
    poly = np.zeros_like(s)
    for k in range(n + 1):
        c = math.factorial(n + k) / (math.factorial(k) * math.factorial(n - k)) / 2.0**k
        poly = poly + c * s ** float(n - k)
    return math.sqrt(math.pi / 2.0) * np.exp(-s) * poly


def _series(a: float, s: np.ndarray) -> np.ndarray:
    """Ascending series of M_a(s), a > 0, accurate for small s."""
    y = s * s / 4.0
    if _is_integer(a):
        n = int(round(a))
        head = sum(
            math.factorial(n - k - 1) / math.factorial(k) * (-y) ** k for k in range(n)
        )
        head = 2.0 ** (n - 1) * head
        i_sum = sum(y**k / (math.factorial(k) * math.factorial(n + k)) for k in range(_SERIES_TERMS))
        psi_sum = sum(
            (special.digamma(k + 1) + special.digamma(n + k + 1))
            * y**k
            / (math.factorial(k) * math.factorial(n + k))
            for k in range(_SERIES_TERMS)
        )
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(s > 0, np.log(np.where(s > 0, s, 1.0) / 2.0), 0.0)
        s2n = s ** (2.0 * n) * 2.0 ** (-n)
        return head + (-1) ** (n + 1) * logs * s2n * i_sum + (-1) ** n * 0.5 * s2n * psi_sum
    minus = sum(y**k / (math.factorial(k) * special.gamma(k + 1 - a)) for k in range(_SERIES_TERMS))
    plus = sum(y**k / (math.factorial(k) * special.gamma(k + 1 + a)) for k in range(_SERIES_TERMS))
    pref = math.pi / (2.0 * math.sin(a * math.pi))
    return pref * (2.0**a * minus - 2.0 ** (-a) * s ** (2.0 * a) * plus)


def _m_positive(a: float, s: np.ndarray) -> np.ndarray:
    n = _half_integer(a)
    if n is not None:
        return _m_half(n, s)
    return bessel_path(a, s)


def bessel_path(a: float, s: np.ndarray) -> np.ndarray:
    """M_a(s) through modified Bessel K (scipy) with a small-argument series."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = s < SMALL_S
    out[small] = _series(a, s[small])
    big = ~small
    sb = s[big]
    # kve(a, s) = K_a(s) e^s keeps large arguments out of underflow
    out[big] = np.exp(a * np.log(sb) - sb) * special.kve(a, sb)
    return out


def scaled_bessel_k(a: float, s) -> np.ndarray:
    """M_a(s) = s^a K_a(s) for s >= 0 (infinite at s = 0 when a <= 0)."""
    s = np.asarray(s, dtype=float)
    if a > 0:
        return _m_positive(a, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        if a == 0:
            return np.where(s > 0, special.k0(np.where(s > 0, s, 1.0)), np.inf)
        # K_a = K_{-a}
        return np.where(s > 0, s ** (2.0 * a) * _m_positive(-a, s), np.inf)


def limit_at_zero(a: float) -> float:
    return special.gamma(a) * 2.0 ** (a - 1.0)


# ----------------------------------------------------------- radial profile


@dataclass(frozen=True)
class RadialProfile:
    """phi, g1, g2 as functions of the scaled distance s = r/scale."""

    nu: float

    @property
    def norm(self) -> float:
        # the evaluation path itself at s=0, so that phi(0) == 1 exactly
        return float(scaled_bessel_k(self.nu, np.zeros(1))[0])

    def phi(self, s) -> np.ndarray:
        return scaled_bessel_k(self.nu, s) / self.norm

    def g1(self, s) -> np.ndarray:
        return -scaled_bessel_k(self.nu - 1.0, s) / self.norm

    def g2(self, s) -> np.ndarray:
        return scaled_bessel_k(self.nu - 2.0, s) / self.norm


def profile(spec: KernelSpec) -> RadialProfile:
    return RadialProfile(spec.nu)


def require_order(spec: KernelSpec, order: int) -> None:
    """Gradients need nu > 1/2 bounded (nu > 1 continuous); Hessians nu > 2."""
    if order >= 2 and not spec.nu > 2:
        raise SmoothnessError(
            f"second derivatives need mu - d/2 > 2; got nu = {spec.nu}"
        )
    if order == 1 and not spec.nu >= 0.5:
        raise SmoothnessError(
            f"first derivatives need mu - d/2 >= 1/2; got nu = {spec.nu}"
        )


# --------------------------------------------------------------- pointwise


def matern_value(spec: KernelSpec, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise KernelError("distance must be nonnegative")
    return profile(spec).phi(r / spec.scale)


def _g1_ambient(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    """g1(r/l)/l^2 with the coincident value replaced by the finite limit, or 0."""
    prof = profile(spec)
    s = r / spec.scale
    if spec.nu > 1:
        return prof.g1(s) / spec.scale**2
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(s > 0, prof.g1(np.where(s > 0, s, 1.0)), 0.0)
    return g / spec.scale**2


def kernel_gradient_x(spec: KernelSpec, x, z) -> np.ndarray:
    require_order(spec, 1)
    diff = np.asarray(x, float) - np.asarray(z, float)
    r = np.linalg.norm(diff, axis=-1)
    return _g1_ambient(spec, r)[..., None] * diff


def kernel_hessian_x(spec: KernelSpec, x, z) -> np.ndarray:
    require_order(spec, 2)
    diff = np.asarray(x, float) - np.asarray(z, float)
    r = np.linalg.norm(diff, axis=-1)
    prof = profile(spec)
    s = r / spec.scale
    g1 = prof.g1(s) / spec.scale**2
    g2 = prof.g2(s) / spec.scale**4
    eye = np.eye(diff.shape[-1])
    return g1[..., None, None] * eye + g2[..., None, None] * (diff[..., :, None] * diff[..., None, :])


# ---------------------------------------------------------------- matrices


def _check_points(spec: KernelSpec, P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[-1] != spec.d:
        raise KernelError(f"points have dimension {P.shape[-1]}, kernel expects {spec.d}")
    return P


def pairwise(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = A[:, None, :] - B[None, :, :]
    return diff, np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def gram(spec: KernelSpec, A, B) -> np.ndarray:
    A = _check_points(spec, A)
    B = _check_points(spec, B)
    _, r = pairwise(A, B)
    return profile(spec).phi(r / spec.scale)


@dataclass
class PairDerivatives:
    """phi, gradient factor and Hessian factor for every pair (a_i, b_j)."""

    diff: np.ndarray  # (nA, nB, d), a_i - b_j
    phi: np.ndarray
    g1: np.ndarray  # already divided by scale^2
    g2: np.ndarray | None  # divided by scale^4

    @property
    def gradient(self) -> np.ndarray:
        return self.g1[..., None] * self.diff


def pair_derivatives(spec: KernelSpec, A, B, order: int = 2) -> PairDerivatives:
    A = _check_points(spec, A)
    B = _check_points(spec, B)
    require_order(spec, order)
    diff, r = pairwise(A, B)
    prof = profile(spec)
    s = r / spec.scale
    phi = prof.phi(s)
    g1 = _g1_ambient(spec, r)
    g2 = prof.g2(s) / spec.scale**4 if order >= 2 else None
    return PairDerivatives(diff, phi, g1, g2)


# ----------------------------------------------------------- factorization


@dataclass
class GramFactor:
    """Cholesky factor of a Gram matrix, recording whether jitter was added."""

    cho: tuple
    n: int
    jitter: float = 0.0

    def solve(self, b: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self.cho, b, check_finite=False)

    @property
    def condition_estimate(self) -> float:
        """Cheap lower bound on cond_2 from the Cholesky diagonal."""
        dg = np.abs(np.diag(self.cho[0]))
        return float((dg.max() / dg.min()) ** 2)


def factorize(G: np.ndarray) -> GramFactor:
    """Cholesky with one retry at ridge 1e-12 * mean(diag)."""
    try:
        return GramFactor(sla.cho_factor(G, lower=True, check_finite=False), G.shape[0])
    except np.linalg.LinAlgError:
        pass
    ridge = 1e-12 * float(np.mean(np.diag(G)))
    try:
        cho = sla.cho_factor(G + ridge * np.eye(G.shape[0]), lower=True, check_finite=False)
        return GramFactor(cho, G.shape[0], ridge)
    except np.linalg.LinAlgError:
        raise GramFactorizationError(
            "Gram matrix is not numerically positive definite", float(np.linalg.cond(G))
        ) from None
