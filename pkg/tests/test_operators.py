import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import circle, sphere
from evokansa import kernels, operators, surfaces
from evokansa.checks import fibonacci_sphere
from evokansa.kernels import KernelSpec
from evokansa.operators import OperatorForm, SurfaceData
from evokansa.surfaces import ParametricSurface

SPEC = KernelSpec(mu=4.0, d=3)  # nu = 5/2: phi(s) = e^-s (1 + s + s^2/3)


def torus(R=2.0, r=0.7):
    return ParametricSurface.from_strings(
        [f"({R} + {r}*cos(v))*cos(u)", f"({R} + {r}*cos(v))*sin(u)", f"{r}*sin(v)"],
        ["u", "v"], [(0, 2 * math.pi), (0, 2 * math.pi)], [True, True])


def _phi_mp(s):
    return mp.exp(-s) * (1 + s + s * s / 3)


def _lb_sphere(th, ph, z):
    def f(a, b):
        x = [mp.sin(a) * mp.cos(b), mp.sin(a) * mp.sin(b), mp.cos(a)]
        return _phi_mp(mp.sqrt(sum((xi - zi) ** 2 for xi, zi in zip(x, z))))
    f_tt = mp.diff(f, (th, ph), (2, 0))
    f_t = mp.diff(f, (th, ph), (1, 0))
    f_pp = mp.diff(f, (th, ph), (0, 2))
    return f_tt + mp.cos(th) / mp.sin(th) * f_t + f_pp / mp.sin(th) ** 2


def _lb_torus(u, v, z, R=2.0, r=0.7):
    def f(a, b):
        rho = R + r * mp.cos(b)
        x = [rho * mp.cos(a), rho * mp.sin(a), r * mp.sin(b)]
        return _phi_mp(mp.sqrt(sum((xi - zi) ** 2 for xi, zi in zip(x, z))))
    rho = R + r * mp.cos(v)
    return (mp.diff(f, (u, v), (2, 0)) / rho**2 + mp.diff(f, (u, v), (0, 2)) / r**2
            - mp.sin(v) * mp.diff(f, (u, v), (0, 1)) / (r * rho))


def _analytic_lap(s, phi, z):
    g = s.geometry(np.array([phi]), 0.0)
    return float(operators.surface_laplacian_kernel_analytic(
        g.points[0], g.normals()[0], g.mean_curvature()[0], np.asarray(z, float), SPEC))


@pytest.mark.parametrize("phi,zphi", [((0.7, 0.4), (1.1, 0.9)), ((2.2, 5.0), (2.0, 4.1)),
                                      ((1.3, 2.0), (1.3, 2.0)), ((0.4, 1.0), (2.8, 4.0))])
def test_analytic_laplacian_matches_parameter_space_oracle_sphere(phi, zphi):
    mp.mp.dps = 30
    s = sphere()
    z = s.points(np.array([zphi]), 0.0)[0]
    oracle = float(_lb_sphere(mp.mpf(phi[0]), mp.mpf(phi[1]), [mp.mpf(v) for v in z]))
    assert _analytic_lap(s, phi, z) == pytest.approx(oracle, abs=1e-8)


@pytest.mark.parametrize("phi,zphi", [((0.3, 0.4), (0.9, 1.9)), ((2.0, 3.5), (2.4, 3.0)),
                                      ((4.0, 1.0), (4.0, 1.0))])
def test_analytic_laplacian_matches_parameter_space_oracle_torus(phi, zphi):
    mp.mp.dps = 30
    s = torus()
    z = s.points(np.array([zphi]), 0.0)[0]
    oracle = float(_lb_torus(mp.mpf(phi[0]), mp.mpf(phi[1]), [mp.mpf(v) for v in z]))
    assert _analytic_lap(s, phi, z) == pytest.approx(oracle, abs=1e-8)


def test_laplacian_identity_on_x3():
    # ambient identity applied to the field x3 on the unit sphere
    P = fibonacci_sphere(50)
    n, H = P, np.full(50, 2.0)
    grad = np.tile([0.0, 0.0, 1.0], (50, 1))
    lap = 0.0 - 0.0 - H * np.sum(n * grad, axis=1)
    np.testing.assert_allclose(lap, -2 * P[:, 2], atol=1e-15)


def test_laplacian_kernel_at_coincidence():
    x = np.array([0.0, 0.6, 0.8])
    g1_0 = float(kernels.profile(SPEC).g1(np.zeros(1))[0])
    val = operators.surface_laplacian_kernel_analytic(x, x, 2.0, x, SPEC)
    assert float(val) == pytest.approx(2 * g1_0, rel=1e-14)


def test_surface_gradient_kernel():
    x = np.array([0.0, 0.6, 0.8])
    np.testing.assert_array_equal(operators.surface_gradient_kernel(x, x, x, SPEC), 0.0)
    # z along the normal line: ambient gradient parallel to n
    g = operators.surface_gradient_kernel(x, x, 0.5 * x, SPEC)
    np.testing.assert_allclose(g, 0.0, atol=1e-16)


_unit = st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1)


@given(_unit, _unit, _unit)
def test_surface_gradient_orthogonal_and_projection(n, x, z):
    n = np.array(n) / np.linalg.norm(n)
    g = operators.surface_gradient_kernel(np.array(x), n, np.array(z), SPEC)
    assert abs(float(g @ n)) <= 1e-12
    P = operators.projection(n)[0]
    np.testing.assert_allclose(P @ P, P, atol=1e-12)
    np.testing.assert_allclose(P, P.T, atol=1e-12)


def test_surface_divergence_examples():
    s = sphere("exp(t/5)")
    phi = np.array([[0.5, 1.0], [2.0, 3.0]])
    for t in (0.0, 0.7):
        np.testing.assert_allclose(operators.surface_divergence_velocity(s, phi, t), 0.4, rtol=1e-13)
    moving = sphere("1")
    moving = ParametricSurface.from_strings(
        ["sin(th)*cos(ph) + t", "sin(th)*sin(ph)", "cos(th)"], ["th", "ph"],
        [(0, math.pi), (0, 2 * math.pi)], [False, True])
    np.testing.assert_allclose(operators.surface_divergence_velocity(moving, phi, 0.3), 0.0, atol=1e-14)
    np.testing.assert_allclose(operators.surface_divergence_velocity(circle("exp(t/5)"), [[0.3], [2.0]], 0.0),
                               0.2, rtol=1e-13)
    v = surfaces.AmbientField.from_strings(["x1/5", "x2/5", "x3/5"], 3)
    P = fibonacci_sphere(20)
    np.testing.assert_allclose(operators.surface_divergence_field(v.jacobian(P, 0.0), P), 0.4, rtol=1e-14)


@pytest.fixture(scope="module")
def sphere500():
    Z = fibonacci_sphere(500)
    G, fac = operators.build_gk(Z, Z, Z, SPEC)
    return Z, G, fac


def test_gk_constant_and_linear(sphere500):
    Z, G, _ = sphere500
    ones = np.ones(len(Z))
    assert max(np.max(np.abs(g @ ones)) for g in G) <= 5e-2
    grad_x1 = np.stack([g @ Z[:, 0] for g in G], axis=1)
    exact = operators.projection(Z)[:, :, 0]
    assert np.linalg.norm(grad_x1 - exact) / np.linalg.norm(exact) <= 5e-2


def test_gk_row_vanishes_for_axis_normal():
    Z = fibonacci_sphere(40)
    n = np.tile([0.0, 0.0, 1.0], (40, 1))
    G, _ = operators.build_gk(Z, Z, n, SPEC)
    np.testing.assert_array_equal(G[2], 0.0)


def test_discrete_laplacian_a_on_sphere(sphere500):
    Z, G, fac = sphere500
    L = operators.discrete_laplacian_a(Z, Z, Z, Z, SPEC, fac, G).matrix
    rel = np.linalg.norm(L @ Z[:, 2] + 2 * Z[:, 2]) / np.linalg.norm(2 * Z[:, 2])
    assert rel <= 5e-2
    assert np.max(np.abs(L @ np.ones(len(Z)))) <= 1e-1


def test_constant_error_decreases_with_density():
    errs = []
    for n in (250, 500, 1000):
        Z = fibonacci_sphere(n)
        L = operators.discrete_laplacian_a(Z, Z, Z, Z, SPEC).matrix
        errs.append(np.max(np.abs(L @ np.ones(n))))
    assert errs[0] > errs[1] > errs[2]


def test_laplacian_two_points_definition():
    Z = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    G, fac = operators.build_gk(Z, Z, Z, SPEC)
    L = operators.discrete_laplacian_a(Z, Z, Z, Z, SPEC).matrix
    np.testing.assert_array_equal(L, sum(g @ g for g in G))


def test_variant_b_oversampled_and_bookkeeping():
    Z, X = fibonacci_sphere(300), fibonacci_sphere(450)
    op = operators.discrete_laplacian_b(X, Z, X, SPEC)
    assert op.shape == (450, 300)
    rel = np.linalg.norm(op.matrix @ Z[:, 2] + 2 * X[:, 2]) / np.linalg.norm(2 * X[:, 2])
    assert rel <= 5e-2
    assert [(name, n) for name, n, _ in op.factorizations] == [("X", 450), ("Z", 300)]
    a = operators.discrete_laplacian_a(Z, Z, Z, Z, SPEC).matrix
    b = operators.discrete_laplacian_b(Z, Z, Z, SPEC).matrix
    np.testing.assert_array_equal(a, b)


def _data(s, t=0.0, n=(6, 12), vel=True):
    cs = surfaces.generate_nodes(s, t, target_n=int(np.prod(n)), with_fill=False)
    g = s.geometry(cs.phi_X, t)
    return SurfaceData(cs.X, cs.Z, g.normals(), g.normals(), g.mean_curvature(),
                       g.div_velocity(), g.velocity, True)


def test_assemble_limits():
    data = _data(sphere("exp(t/5)"))
    sysm = operators.analytic_system(data, 1.0, OperatorForm.CONSISTENT, SPEC)
    G = kernels.gram(SPEC, data.X, data.Z)
    np.testing.assert_allclose(sysm.lhs(0.5, 1e-14), G, atol=1e-13)
    np.testing.assert_array_equal(sysm.lhs(1.0, 0.3), G)
    static = _data(sphere())
    zero = operators.analytic_system(static, 0.0, OperatorForm.CONSISTENT, SPEC)
    np.testing.assert_array_equal(zero.lhs(0.5, 0.3), G)


def test_literal_form_on_static_surface_equals_consistent():
    data = _data(sphere())
    a = operators.analytic_system(data, 1.0, OperatorForm.CONSISTENT, SPEC).A
    b = operators.analytic_system(data, 1.0, OperatorForm.LITERAL, SPEC).A
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_missing_data():
    data = _data(sphere())
    data.divv_X = None
    with pytest.raises(operators.OperatorError):
        operators.analytic_system(data, 1.0, OperatorForm.CONSISTENT, SPEC)
