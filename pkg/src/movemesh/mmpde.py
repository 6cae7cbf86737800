"""Moving-mesh PDE for the map x(xi, t) on a fixed computational mesh.

The equation is the x-form

    tau dx/dt = B (sum_ij A_ij d2x/dxi_i dxi_j - sum_i b_i dx/dxi_i)

with ``A_ij = grad(xi_i)^T G^-1 grad(xi_j)``,
``b_i = sum_j grad(xi_i)^T dG^-1/dxi_j grad(xi_j)`` and the balance factor
``B = (sum_i A_ii^2 + b_i^2)^(-1/2)``.  The right-hand side equals
``-B J div_x(G^-1 grad_x xi)``; the divergence is evaluated in lumped P1 weak
form on the physical mesh, which is stable on strongly graded meshes where
nodal second differences of a steep monitor fold the mesh.  ``A``, ``b`` and
the nodal inverse Jacobian use least-squares quadratic fits and star averages
over the computational mesh.

Boundary nodes are fixed by default.  With ``slide=True`` nodes inside
straight axis-aligned boundary segments move along the segment (the natural
no-flux condition of the weak form); corners stay put.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import TangledMeshError, TriangleMesh, signed_areas
from .monitor import MonitorError, MonitorField, inverse_2x2
from .recovery import gradient_recovery_operators, quadratic_fit_operators

logger = logging.getLogger(__name__)

BALANCE_GUARD = 1e-30


class MeshStallError(RuntimeError):
    """Mesh step could not avoid tangling within the allowed halvings."""


class _ComputationalOperators:
    """Quantities that depend only on the frozen computational mesh."""

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        self.fit = quadratic_fit_operators(mesh)
        xi = mesh.nodes[mesh.triangles]
        self.xi_edges = np.stack([xi[:, 1] - xi[:, 0], xi[:, 2] - xi[:, 0]], axis=2)
        area = mesh.areas
        star = np.bincount(mesh.triangles.ravel(), np.repeat(area, 3), minlength=mesh.n_nodes)
        rows = mesh.triangles.ravel()
        cols = np.repeat(np.arange(mesh.n_elements), 3)
        vals = np.repeat(area, 3) / star[rows]
        self.star_average = sparse.csr_matrix((vals, (rows, cols)),
                                              shape=(mesh.n_nodes, mesh.n_elements))
        e = mesh.edges
        self.h_min = float(np.hypot(*(mesh.nodes[e[:, 1]] - mesh.nodes[e[:, 0]]).T).min())
        self.interior = mesh.boundary_markers == 0
        self.slide_axis = _sliding_axes(mesh)

    def free_mask(self, slide):
        """(N, 2) mask of coordinates allowed to move."""
        free = np.repeat(self.interior[:, None], 2, axis=1)
        if slide:
            free[self.slide_axis == 0, 0] = True
            free[self.slide_axis == 1, 1] = True
        return free


def _sliding_axes(mesh):
    """0 for nodes inside a horizontal boundary segment, 1 for vertical, -1 elsewhere."""
    n = mesh.n_nodes
    axis = np.full(n, -1)
    be = mesh.boundary_edges
    d = mesh.nodes[be[:, 1]] - mesh.nodes[be[:, 0]]
    tol = 1e-12 * mesh.diameter
    count = np.bincount(be.ravel(), minlength=n)
    nh = np.bincount(be[np.abs(d[:, 1]) <= tol].ravel(), minlength=n)
    nv = np.bincount(be[np.abs(d[:, 0]) <= tol].ravel(), minlength=n)
    axis[(count == 2) & (nh == 2)] = 0
    axis[(count == 2) & (nv == 2)] = 1
    return axis


@dataclass
class MeshMapping:
    """Node map from the computational mesh to physical coordinates."""

    computational: TriangleMesh
    x: np.ndarray
    tau: float = 1.0
    _ops: _ComputationalOperators | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float)
        if self.x.shape != self.computational.nodes.shape:
            raise ValueError("physical coordinates must match the computational node layout")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self._ops is None:
            self._ops = _ComputationalOperators(self.computational)

    @classmethod
    def identity(cls, mesh: TriangleMesh, tau=1.0):
        return cls(mesh, mesh.nodes.copy(), tau)

    @property
    def ops(self) -> _ComputationalOperators:
        return self._ops

    def with_coords(self, x) -> "MeshMapping":
        return MeshMapping(self.computational, x, self.tau, self._ops)

    @cached_property
    def physical(self) -> TriangleMesh:
        return self.computational.with_nodes(self.x)


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def element_jacobians(mapping: MeshMapping, check=True):
    """Element-constant ``J = dx/dxi`` and ``det J`` for every element."""
    tris = mapping.computational.triangles
    p = mapping.x[tris]
    X = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    J = X @ np.linalg.inv(mapping.ops.xi_edges)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if check:
        bad = np.flatnonzero(det <= 0)
        if bad.size:
            raise TangledMeshError(bad)
    return J, det


def mapping_jacobian(mapping: MeshMapping, k: int):
    J, det = element_jacobians(mapping, check=False)
    if det[k] <= 0:
        raise TangledMeshError(k)
    return J[k].copy(), float(det[k])


# ---------------------------------------------------------------------------
# coefficients and velocity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MmpdeCoefficients:
    A: np.ndarray          # (N, 2, 2)
    b: np.ndarray          # (N, 2)
    B: np.ndarray          # (N,)
    grad_xi: np.ndarray    # (N, 2, 2), row i is grad(xi_i)
    Ginv: np.ndarray       # (N, 2, 2)


def _monitor_array(G):
    arr = G.G if isinstance(G, MonitorField) else np.asarray(G, dtype=float)
    det = arr[:, 0, 0] * arr[:, 1, 1] - arr[:, 0, 1] * arr[:, 1, 0]
    bad = (det <= 0) | (arr[:, 0, 0] <= 0)
    if bad.any():
        raise MonitorError(f"monitor is not SPD at node {int(np.flatnonzero(bad)[0])}")
    return arr


def mmpde_coefficients(mapping: MeshMapping, G) -> MmpdeCoefficients:
    ops = mapping.ops
    J, _ = element_jacobians(mapping)
    Jinv = np.linalg.inv(J)                       # row i = grad(xi_i) on the element
    grad_xi = (ops.star_average @ Jinv.reshape(-1, 4)).reshape(-1, 2, 2)
    Ginv = inverse_2x2(_monitor_array(G))
    A = np.einsum("nik,nkl,njl->nij", grad_xi, Ginv, grad_xi)
    flat = Ginv.reshape(-1, 4)
    dG = np.stack([(ops.fit.dx @ flat).reshape(-1, 2, 2),
                   (ops.fit.dy @ flat).reshape(-1, 2, 2)], axis=1)   # (N, j, 2, 2)
    b = np.einsum("nik,njkl,njl->ni", grad_xi, dG, grad_xi)
    B = 1.0 / np.sqrt(A[:, 0, 0] ** 2 + A[:, 1, 1] ** 2 + (b ** 2).sum(axis=1) + BALANCE_GUARD)
    return MmpdeCoefficients(A=A, b=b, B=B, grad_xi=grad_xi, Ginv=Ginv)


def _xi_divergence(mapping: MeshMapping, Ginv):
    """Nodal ``div_x(G^-1 grad_x xi_i)`` for both i, shape ``(N, 2)``.

    Lumped P1 weak form on the physical mesh: the computational coordinates
    are linear on each element and ``G^-1`` is averaged over its vertices.
    Rows of boundary nodes carry the natural no-flux condition.
    """
    tris = mapping.computational.triangles
    p = mapping.x[tris]
    area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    # basis gradients: rotate the opposite edge by 90 degrees
    e = np.roll(p, -1, axis=1) - np.roll(p, 1, axis=1)
    grads = np.stack([-e[:, :, 1], e[:, :, 0]], axis=2) / area2[:, None, None]
    xi = mapping.computational.nodes[tris]
    grad_xi = np.einsum("eai,ead->eid", xi, grads)
    Gk = Ginv[tris].mean(axis=1)
    flux = np.einsum("ekl,eil->eik", Gk, grad_xi)
    local = -0.5 * area2[:, None, None] * np.einsum("ead,eid->eai", grads, flux)
    n = mapping.x.shape[0]
    out = np.column_stack([np.bincount(tris.ravel(), local[..., i].ravel(), minlength=n)
                           for i in range(2)])
    mass = np.bincount(tris.ravel(), np.repeat(area2 / 6.0, 3), minlength=n)
    return out / mass[:, None]


def assemble_mmpde_velocity(mapping: MeshMapping, G, coefficients=None, slide=False):
    """Node velocities ``dx/dt``, shape ``(N, 2)``.

    Uses ``dx/dt = -(B / tau) J div_x(G^-1 grad_x xi)``, the same equation as
    the x-form, with the divergence in conservative weak form so the discrete
    steady state is an equidistribution.  Fixed boundary nodes get zero
    velocity; with ``slide`` nodes inside straight axis-aligned boundary
    segments move tangentially.
    """
    c = coefficients or mmpde_coefficients(mapping, G)
    ops = mapping.ops
    xi_t = _xi_divergence(mapping, c.Ginv)
    free = ops.free_mask(slide)
    # on a sliding node the computational coordinate normal to the segment is fixed
    xi_t[ops.slide_axis == 0, 1] = 0.0
    xi_t[ops.slide_axis == 1, 0] = 0.0
    J = np.linalg.inv(c.grad_xi)
    v = -(c.B / mapping.tau)[:, None] * np.einsum("nij,nj->ni", J, xi_t)
    v[~free] = 0.0
    return v


def suggest_dt(mapping: MeshMapping, cfl=0.2):
    """Explicit step estimate from the smallest computational edge."""
    return cfl * mapping.ops.h_min ** 2 * mapping.tau


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeshStep:
    mapping: MeshMapping
    dt: float
    velocity: np.ndarray
    halvings: int

    @property
    def displacement(self):
        return float(np.hypot(*(self.velocity * self.dt).T).max(initial=0.0))


def _untangled(mapping, x):
    return bool((signed_areas(x, mapping.computational.triangles) > 0).all())


def principal_operator(mapping: MeshMapping, coefficients: MmpdeCoefficients):
    """Weak-form ``(B / tau) sum_ij d/dxi_i (A_ij d/dxi_j)`` on the computational mesh.

    Lumped P1 stiffness with element-averaged ``A``.  Its spectrum is real and
    non-positive, and boundary rows carry the natural condition, which makes it
    a stable implicit part for both fixed and sliding boundaries.
    """
    mesh = mapping.computational
    tris = mesh.triangles
    grads = mesh.basis_gradients
    Ak = coefficients.A[tris].mean(axis=1)
    Ak = 0.5 * (Ak + np.swapaxes(Ak, 1, 2))
    local = mesh.areas[:, None, None] * np.einsum("ead,edf,ebf->eab", grads, Ak, grads)
    n = mesh.n_nodes
    K = sparse.csr_matrix((local.ravel(), (np.repeat(tris, 3, axis=1).ravel(),
                                           np.tile(tris, (1, 3)).ravel())), shape=(n, n))
    return -sparse.diags(coefficients.B / mapping.tau / mesh.lumped_mass) @ K


def step_mesh(mapping: MeshMapping, G, dt, scheme="euler", max_halvings=20,
              slide=False) -> MeshStep:
    """Advance the node map by one pseudo-time step with tangling rollback.

    ``scheme="euler"`` is forward Euler ``x <- x + dt dx/dt``.  ``"implicit"``
    is linearly implicit: the increment solves ``(I - dt L) dx = dt dx/dt``
    with ``L`` the frozen principal part of the MMPDE, which leaves the
    steady state unchanged and removes the explicit step limit.  A step that
    would invert an element is retried with half the step, at most
    ``max_halvings`` times.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if scheme not in ("euler", "implicit"):
        raise ValueError(f"unknown scheme {scheme!r}")
    coeffs = mmpde_coefficients(mapping, G)
    v = assemble_mmpde_velocity(mapping, G, coeffs, slide=slide)
    free = mapping.ops.free_mask(slide)
    if scheme == "implicit":
        L = principal_operator(mapping, coeffs)
        n = mapping.x.shape[0]
        eye = sparse.identity(n, format="csr")
    h = dt
    for halving in range(max_halvings + 1):
        if scheme == "euler":
            dx = h * v
        else:
            dx = np.zeros_like(mapping.x)
            for k in range(2):
                f = np.flatnonzero(free[:, k])
                K = (eye - h * L)[f][:, f].tocsc()
                dx[f, k] = spla.spsolve(K, h * v[f, k])
        x_new = mapping.x + dx
        if _untangled(mapping, x_new):
            return MeshStep(mapping.with_coords(x_new), h, dx / h, halving)
        h *= 0.5
    raise MeshStallError(f"mesh step stalled: tangling persists after {max_halvings} halvings "
                         f"(dt reduced to {h * 2:.3e})")


@dataclass
class RelaxResult:
    mapping: MeshMapping
    converged: bool
    steps: int
    displacements: list


def relax_mesh(mapping: MeshMapping, monitor_of: Callable[[np.ndarray], MonitorField], *,
               dt=None, scheme="euler", max_steps=10000, tol=1e-10, grow=1.1,
               slide=False, callback=None) -> RelaxResult:
    """Step the MMPDE with a fixed monitor rule until it is stationary.

    ``monitor_of(x)`` returns the monitor evaluated at physical nodes ``x``.
    Convergence means ``max |dx/dt| * dt0 < tol * diam`` where ``dt0`` is the
    nominal step, so steps shortened by rollback cannot fake convergence.
    """
    dt0 = dt if dt is not None else (suggest_dt(mapping) if scheme == "euler" else 1.0)
    h = dt0
    limit = tol * mapping.computational.diameter
    disp = []
    for n in range(1, max_steps + 1):
        step = step_mesh(mapping, monitor_of(mapping.x), h, scheme, slide=slide)
        mapping = step.mapping
        disp.append(step.displacement)
        if callback is not None:
            callback(step)
        if float(np.hypot(*step.velocity.T).max(initial=0.0)) * dt0 < limit:
            return RelaxResult(mapping, True, n, disp)
        h = min(step.dt * grow, dt0)
    return RelaxResult(mapping, False, max_steps, disp)


# ---------------------------------------------------------------------------
# ALE correction
# ---------------------------------------------------------------------------

def ale_convective_term(mapping: MeshMapping, mesh_velocity, u):
    """Nodal ``xdot . grad_x u`` with the gradient recovered on the physical mesh."""
    u = np.asarray(u, dtype=float)
    mesh_velocity = np.asarray(mesh_velocity, dtype=float)
    element_jacobians(mapping)
    gx, gy = gradient_recovery_operators(mapping.physical)
    if u.ndim == 1:
        return mesh_velocity[:, 0] * (gx @ u) + mesh_velocity[:, 1] * (gy @ u)
    return mesh_velocity[:, 0, None] * (gx @ u) + mesh_velocity[:, 1, None] * (gy @ u)


# ---------------------------------------------------------------------------
# one-dimensional equidistribution reference
# ---------------------------------------------------------------------------

def equidistribution_oracle(density, n_cells, a=0.0, b=1.0, n_samples=10_000):
    """Abscissas that equidistribute ``density`` over ``[a, b]``.

    Solves ``xi(x) = int_a^x M / int_a^b M`` on ``n_samples`` points with the
    trapezoid rule and inverts it by linear interpolation at ``xi = k / n_cells``.
    """
    s = np.linspace(a, b, n_samples)
    m = density(s)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (m[1:] + m[:-1]) * np.diff(s))])
    cum /= cum[-1]
    return np.interp(np.arange(n_cells + 1) / n_cells, cum, s)


def stratified_monitor(density):
    """``x -> diag(M(x1), 1)`` as a monitor callback."""
    def monitor_of(x):
        G = np.zeros((len(x), 2, 2))
        G[:, 0, 0] = density(x[:, 0])
        G[:, 1, 1] = 1.0
        return MonitorField(G, alpha=1.0)
    return monitor_of
