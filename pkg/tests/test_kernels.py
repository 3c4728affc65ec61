import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evokansa import kernels
from evokansa.kernels import (GramFactorizationError, KernelError, KernelSpec, SmoothnessError,
                              factorize, gram, kernel_gradient_x, kernel_hessian_x, matern_value)

mp.mp.dps = 40


def m_oracle(a, s):
    """s^a K_a(s) at 40 digits."""
    return float(mp.mpf(s) ** a * mp.besselk(a, mp.mpf(s)))


def matern_oracle(nu, r):
    lim = mp.gamma(nu) * mp.mpf(2) ** (nu - 1)
    return float(mp.mpf(r) ** nu * mp.besselk(nu, r) / lim)


@pytest.mark.parametrize("a", [0.5, 1.5, 2.5, 3.5, 1.0, 2.0, 3.0, 0.7, 2.3])
@pytest.mark.parametrize("s", [1e-8, 3e-5, 1e-4, 2e-4, 0.01, 0.7, 1.0, 5.0, 30.0, 100.0])
def test_scaled_bessel_against_mpmath(a, s):
    got = float(kernels.scaled_bessel_k(a, np.array([s]))[0])
    assert got == pytest.approx(m_oracle(a, s), rel=1e-12)


@pytest.mark.parametrize("a", [-0.5, -1.0, -1.5, -0.3])
def test_negative_orders(a):
    s = np.array([0.01, 0.5, 3.0])
    np.testing.assert_allclose(kernels.scaled_bessel_k(a, s), [m_oracle(a, x) for x in s], rtol=1e-12)


def test_closed_form_values():
    assert float(matern_value(KernelSpec(mu=1.0, d=1), 1.0)) == pytest.approx(math.exp(-1), rel=1e-15)
    assert float(matern_value(KernelSpec(mu=2.0, d=1), 1.0)) == pytest.approx(2 * math.exp(-1), rel=1e-15)
    assert float(matern_value(KernelSpec(mu=2.0, d=1), 1.0)) == pytest.approx(0.735759, abs=1e-6)


def test_integer_order_against_series_oracle():
    spec = KernelSpec(mu=4.0, d=2)  # nu = 3
    assert spec.nu == 3
    assert float(matern_value(spec, 0.7)) == pytest.approx(matern_oracle(3, 0.7), rel=1e-10)


def test_value_at_zero_and_scale():
    spec = KernelSpec(mu=4.0, d=3, scale=2.5)
    assert float(matern_value(spec, 0.0)) == 1.0
    assert float(matern_value(spec, 2.5)) == pytest.approx(float(matern_value(KernelSpec(4.0, 3), 1.0)))


def test_spec_validation():
    with pytest.raises(KernelError):
        KernelSpec(mu=1.0, d=3)  # nu <= 0
    with pytest.raises(KernelError):
        KernelSpec(mu=4.0, d=3, scale=0.0)
    with pytest.raises(KernelError):
        matern_value(KernelSpec(4.0, 3), -1.0)


@pytest.mark.parametrize("n", range(4))
def test_half_integer_vs_bessel_path(n):
    s = np.logspace(-6, math.log10(20), 300)
    closed = kernels._m_half(n, s)
    generic = kernels.bessel_path(n + 0.5, s)
    assert np.max(np.abs(closed - generic) / closed) <= 1e-10


@pytest.mark.parametrize("nu", [2.5, 3.0, 3.5, 2.2])
def test_small_argument_branch_is_continuous(nu):
    prof = kernels.RadialProfile(nu)
    s0 = kernels.SMALL_S
    below, above = np.array([s0 * (1 - 1e-9)]), np.array([s0 * (1 + 1e-9)])
    for f in (prof.phi, prof.g1, prof.g2):
        assert float(f(below)[0]) == pytest.approx(float(f(above)[0]), rel=1e-9)


def test_gradient_basics():
    spec = KernelSpec(mu=2.0, d=1)  # nu = 3/2, (1+r)e^-r
    assert float(kernel_gradient_x(spec, [1.0], [0.0])[0]) == pytest.approx(-math.exp(-1), rel=1e-14)
    s3 = KernelSpec(mu=4.0, d=3)
    np.testing.assert_array_equal(kernel_gradient_x(s3, [0.3, 0.1, 0.2], [0.3, 0.1, 0.2]), 0.0)


def test_smoothness_bookkeeping():
    with pytest.raises(SmoothnessError):
        kernel_hessian_x(KernelSpec(mu=3.5, d=3), [0, 0, 0], [1, 0, 0])  # nu = 2
    with pytest.raises(SmoothnessError):
        kernel_gradient_x(KernelSpec(mu=1.6, d=3), [0, 0, 0], [1, 0, 0])  # nu = 0.1


def test_hessian_at_coincidence():
    spec = KernelSpec(mu=4.0, d=3)
    H = kernel_hessian_x(spec, [0.2, 0.0, 0.1], [0.2, 0.0, 0.1])
    g1_0 = float(kernels.profile(spec).g1(np.array([0.0]))[0])
    assert g1_0 < 0
    np.testing.assert_allclose(H, g1_0 * np.eye(3), rtol=1e-14)
    assert np.trace(H) == pytest.approx(3 * g1_0)


_vec = st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3)


@given(_vec, _vec, st.sampled_from([4.0, 4.5, 5.0]), st.sampled_from([1.0, 0.6]))
def test_derivatives_match_finite_differences(x, z, mu, scale):
    spec = KernelSpec(mu=mu, d=3, scale=scale)
    x, z = np.array(x), np.array(z)
    h = 1e-5
    grad = kernel_gradient_x(spec, x, z)
    hess = kernel_hessian_x(spec, x, z)
    f = lambda p: float(matern_value(spec, np.linalg.norm(p - z)))  # noqa: E731
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (f(x + e) - f(x - e)) / (2 * h)
        assert abs(grad[i] - fd) <= 1e-6 * max(1.0, np.max(np.abs(grad)))
        fdh = (kernel_gradient_x(spec, x + e, z) - kernel_gradient_x(spec, x - e, z)) / (2 * h)
        np.testing.assert_allclose(hess[i], fdh, atol=1e-5 * max(1.0, np.max(np.abs(hess))))
    np.testing.assert_array_equal(hess, hess.T)


def test_gram_examples(rng):
    spec = KernelSpec(mu=4.0, d=3)
    assert gram(spec, [[0.1, 0.2, 0.3]], [[0.1, 0.2, 0.3]]).tolist() == [[1.0]]
    A, B = rng.normal(size=(3, 3)), rng.normal(size=(2, 3))
    G = gram(spec, A, B)
    assert G.shape == (3, 2)
    assert G[2, 1] == float(matern_value(spec, np.linalg.norm(A[2] - B[1])))
    P = rng.normal(size=(20, 3))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    S = gram(KernelSpec(mu=4.0, d=3), P, P)  # nu = 5/2
    np.testing.assert_array_equal(S, S.T)
    assert factorize(S).jitter == 0.0
    with pytest.raises(KernelError):
        gram(spec, [[0.0, 0.0]], [[0.0, 0.0]])


def test_positive_definite_on_200_sphere_points(rng):
    P = rng.normal(size=(200, 3))
    P /= np.linalg.norm(P, axis=1, keepdims=True)
    f = factorize(gram(KernelSpec(mu=4.0, d=3), P, P))
    assert f.jitter == 0.0 and f.condition_estimate > 1


def test_jitter_policy():
    # semidefinite (duplicated point) matrix: fails plain Cholesky, jitter rescues
    G = np.array([[1.0, 1.0], [1.0, 1.0]])
    f = factorize(G)
    assert f.jitter == pytest.approx(1e-12)
    with pytest.raises(GramFactorizationError) as exc:
        factorize(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert exc.value.condition > 1
