import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from movemesh.chemistry import load_mechanism, parse_mechanism
from movemesh.driver import data_path
from movemesh.femsolver import (P, TEMP, V1, V2, AssemblyError, BoundaryConditions,
                                LowMachProblem, ScalarTransportProblem, TransportConfig,
                                alpha_parameter, delta_parameter, evaluate_qoi_mean,
                                fd_jacobian, n_components)
from movemesh.mesh import rectangle_mesh
from movemesh.recovery import h1_interpolation_error, l2_error

INERT = """
[species]
A  0.028  0  1000
B  0.032  0  1000
[reactions]
"""


def _inert_problem(n=6, stabilize=True, bcs=None):
    mesh = rectangle_mesh(n, n, pattern="alternating")
    tr = TransportConfig(mu=1e-2, conductivity=0.5, diffusivity=(1e-2,), V_ref=1.0)
    return LowMachProblem(mesh, parse_mechanism(INERT), tr, bcs, stabilize)


def _stiffness(mesh):
    n = mesh.n_nodes
    K = np.zeros((n, n))
    for tri, area, g in zip(mesh.triangles, mesh.areas, mesh.basis_gradients):
        K[np.ix_(tri, tri)] += area * g @ g.T
    return K


# -- stabilization parameters ------------------------------------------------

def test_alpha_example_and_limits():
    assert alpha_parameter(0.01, 0.01, 1.0) == pytest.approx(0.005 / np.sqrt(2), rel=1e-14)
    assert alpha_parameter(0.01, 0.01, 1.0) == pytest.approx(0.0035355, abs=1e-7)
    # Re -> infinity: h / (2 V)
    assert alpha_parameter(0.01, 1e-12, 2.0) == pytest.approx(0.01 / 4.0, rel=1e-8)


def test_delta_limits():
    h, rho, mu = 0.02, 1.3, 0.01
    assert delta_parameter(h, rho, 0.0, mu) == pytest.approx(h * h * rho / (2 * mu), rel=1e-14)
    # large flux: h / (2 |v|) with |v| = |beta| / rho
    beta = 1e9
    assert delta_parameter(h, rho, beta, mu) == pytest.approx(h * rho / (2 * beta), rel=1e-8)


# -- low-Mach residual -------------------------------------------------------

def test_constant_state_is_exact():
    prob = _inert_problem()
    U = np.zeros((prob.n_nodes, prob.n_c))
    U[:, TEMP] = 300.0
    U[:, TEMP + 1] = 0.4
    np.testing.assert_allclose(prob.residual(U.ravel()), 0.0, atol=1e-12)


def test_linear_temperature_reproduced():
    mesh = rectangle_mesh(6, 6, pattern="alternating")
    bn = mesh.boundary_nodes
    x = mesh.nodes[:, 0]
    bcs = BoundaryConditions()
    bcs.add(V1, bn, 0.0)
    bcs.add(V2, bn, 0.0)
    bcs.add(TEMP, bn, 300.0 + 100.0 * x[bn])
    bcs.add(TEMP + 1, bn, 0.4)
    bcs.pressure_pin = 0
    tr = TransportConfig(mu=1e-2, conductivity=0.5, diffusivity=(1e-2,), V_ref=1.0)
    prob = LowMachProblem(mesh, parse_mechanism(INERT), tr, bcs)
    U = np.zeros((prob.n_nodes, prob.n_c))
    U[:, TEMP] = 300.0 + 100.0 * x
    U[:, TEMP + 1] = 0.4
    exact = U.ravel().copy()
    inner = mesh.interior_nodes
    U[inner, TEMP] += 20.0 * np.sin(7.0 * inner)
    u = U.ravel()
    for _ in range(3):
        u = u - spsolve(prob.jacobian(u).tocsc(), prob.residual(u))
    T = u.reshape(-1, prob.n_c)[:, TEMP]
    np.testing.assert_allclose(T, exact.reshape(-1, prob.n_c)[:, TEMP], atol=1e-10 * 400)


def _generic_state(prob, seed=0):
    rng = np.random.default_rng(seed)
    x, y = prob.mesh.nodes.T
    U = np.zeros((prob.n_nodes, prob.n_c))
    U[:, P] = 0.01 * np.sin(3 * x)
    U[:, V1] = 0.3 + 0.1 * y
    U[:, V2] = 0.05 * np.cos(2 * x)
    U[:, TEMP] = 600.0 + 200 * x * y
    U[:, TEMP + 1:] = 0.2 + 0.05 * rng.uniform(size=(prob.n_nodes, prob.n_c - TEMP - 1))
    return U.ravel()


def test_temperature_block_matches_stiffness_and_is_symmetric():
    prob = _inert_problem(n=5)
    U = _generic_state(prob).reshape(-1, prob.n_c)
    U[:, V1:V2 + 1] = 0.0
    J = prob.jacobian(U.ravel()).toarray()
    Tb = J[TEMP::prob.n_c, TEMP::prob.n_c]
    K = prob.transport.conductivity * _stiffness(prob.mesh)
    np.testing.assert_allclose(Tb, K, atol=1e-6 * np.abs(K).max())
    np.testing.assert_allclose(Tb, Tb.T, atol=1e-6 * np.abs(K).max())


def test_jacobian_directional_derivative_with_chemistry():
    mesh = rectangle_mesh(6, 3, 0.02, 0.005, pattern="right")
    mech = load_mechanism(data_path("ozone.mech"))
    tr = TransportConfig(mu=7.5e-5, conductivity=0.107, diffusivity=(7.6e-5, 7.6e-5), V_ref=0.25)
    prob = LowMachProblem(mesh, mech, tr)
    u = _generic_state(prob, seed=3)
    typical = np.array([1.0, 0.25, 0.25, 500.0, 0.1, 0.1])
    J = prob.jacobian(u, typical)
    d = np.random.default_rng(1).normal(size=u.size) * np.tile(typical * 1e-3, prob.n_nodes)
    fd = (prob.residual(u + d) - prob.residual(u - d)) / 2.0
    np.testing.assert_allclose(J @ d, fd, atol=1e-4 * np.abs(fd).max())


def test_element_jacobian_equals_colored():
    prob = _inert_problem(n=5)
    u = _generic_state(prob, seed=2)
    typical = np.array([1.0, 0.3, 0.3, 500.0, 0.2])
    A = prob.jacobian(u, typical).toarray()
    B = prob.jacobian_colored(u, typical).toarray()
    scale = np.abs(B).max(axis=1, keepdims=True)
    np.testing.assert_allclose(A / scale, B / scale, atol=1e-6)


def test_nonpositive_temperature_raises():
    prob = _inert_problem(n=3)
    u = _generic_state(prob).reshape(-1, prob.n_c)
    u[:, TEMP] = -1.0
    with pytest.raises(AssemblyError):
        prob.residual(u.ravel())
    assert n_components(3) == 6


# -- scalar convection-diffusion --------------------------------------------

def _mms_error(n):
    mesh = rectangle_mesh(n, n)
    b, nu = np.array([1.0, 0.5]), 0.05
    exact = lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])

    def source(x):
        s0, s1 = np.sin(np.pi * x[:, 0]), np.sin(np.pi * x[:, 1])
        c0, c1 = np.cos(np.pi * x[:, 0]), np.cos(np.pi * x[:, 1])
        return np.pi * (b[0] * c0 * s1 + b[1] * s0 * c1) + 2 * nu * np.pi ** 2 * s0 * s1

    bn = mesh.boundary_nodes
    u = ScalarTransportProblem(mesh, b, nu, source, bn, exact(mesh.nodes[bn])).solve()
    return l2_error(mesh, exact, u)


def test_manufactured_solution_rate():
    errs = np.array([_mms_error(n) for n in (16, 32, 64)])
    rates = np.log2(errs[:-1] / errs[1:])
    assert rates.min() >= 1.5


def test_interpolation_error_slope():
    errs = []
    for n in (8, 16, 32):
        mesh = rectangle_mesh(n, n, pattern="alternating")
        x, y = mesh.nodes.T
        grad = lambda p: np.pi * np.stack([np.cos(np.pi * p[..., 0]) * np.sin(np.pi * p[..., 1]),
                                           np.sin(np.pi * p[..., 0]) * np.cos(np.pi * p[..., 1])],
                                          axis=-1)
        errs.append(h1_interpolation_error(mesh, grad, np.sin(np.pi * x) * np.sin(np.pi * y)))
    slope = np.log2(np.array(errs[:-1]) / errs[1:])
    assert np.all(np.abs(slope - 1.0) <= 0.15)


def _boundary_layer(stabilize, n=10):
    # u(0) = 0, u(1) = 1, natural conditions top and bottom, Pe = 1e3
    mesh = rectangle_mesh(n, n, pattern="alternating")
    x = mesh.nodes[:, 0]
    dn = np.flatnonzero(np.isclose(x, 0.0) | np.isclose(x, 1.0))
    u = ScalarTransportProblem(mesh, [1.0, 0.0], 1e-3, None, dn, x[dn], stabilize).solve()
    return max(u.max() - 1.0, -u.min())


def test_streamline_diffusion_reduces_overshoot():
    stab, gal = _boundary_layer(True), _boundary_layer(False)
    assert gal > 1.0
    assert stab < 0.5 * gal


@pytest.mark.xfail(strict=True, reason="centroid-chord streamline length under-weights the "
                                       "diffusion on triangles; see notes/decisions.md")
def test_boundary_layer_overshoot_within_ten_percent():
    assert _boundary_layer(True) <= 0.10


def test_scalar_matrix_matches_residual():
    mesh = rectangle_mesh(4, 4, pattern="left")
    bn = mesh.boundary_nodes
    pr = ScalarTransportProblem(mesh, [0.7, -0.2], 0.1, lambda c: c[:, 0], bn, np.zeros(len(bn)))
    K, r = pr.matrix()
    u = np.random.default_rng(0).normal(size=mesh.n_nodes)
    np.testing.assert_allclose(K @ u - r, pr.residual(u), atol=1e-12)


def test_fd_jacobian_of_linear_map_is_exact():
    mesh = rectangle_mesh(3, 3)
    A = _stiffness(mesh) + np.eye(mesh.n_nodes)
    J = fd_jacobian(lambda u: A @ u, np.ones(mesh.n_nodes), mesh, 1).toarray()
    np.testing.assert_allclose(J, A, atol=1e-6)


# -- quantity of interest -----------------------------------------------------

def test_qoi_constant_and_linear():
    mesh = rectangle_mesh(40, 10, 0.02, 0.005, pattern="right")
    assert abs(evaluate_qoi_mean(mesh, np.full(mesh.n_nodes, 0.37)) - 0.37) <= 1e-14
    assert abs(evaluate_qoi_mean(mesh, mesh.nodes[:, 0]) - 0.01) <= 1e-12
