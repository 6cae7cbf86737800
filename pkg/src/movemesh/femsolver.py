"""Stabilized P1 finite elements for the stationary low-Mach system.

Unknowns are stored node-interleaved, ``u.reshape(N, n_c)`` with columns
``(p, v1, v2, T, w_1, ..., w_{ns-1})``; the last species is the closure
``w_ns = 1 - sum w_i``.  The residual is the Galerkin form plus pressure
stabilization (tested with grad theta), streamline diffusion for momentum
(tested with beta . grad chi) and for every transport row.  Variable
coefficients use the element centroid; P1 bilinear terms are integrated
exactly.  Dirichlet rows are replaced by ``u - g``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from .chemistry import GAS_CONSTANT, P_ATM, Mechanism, T_REF
from .mesh import ElementGeometry, TangledMeshError, TriangleMesh, streamline_lengths

logger = logging.getLogger(__name__)

P, V1, V2, TEMP = 0, 1, 2, 3


class AssemblyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransportConfig:
    mu: float
    conductivity: float
    diffusivity: tuple          # one per transported species (the first ns - 1)
    V_ref: float
    P_th: float = P_ATM
    gravity: tuple = (0.0, 0.0)

    def __post_init__(self):
        vals = [self.mu, self.conductivity, self.V_ref, *self.diffusivity]
        if not all(v > 0 for v in vals):
            raise ValueError("transport coefficients and V_ref must be positive")


def n_components(n_species):
    return 4 + n_species - 1


@dataclass
class SolutionState:
    values: np.ndarray         # (N, n_c)
    n_species: int

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != n_components(self.n_species):
            raise ValueError(f"state needs {n_components(self.n_species)} columns")

    @classmethod
    def from_vector(cls, u, n_species):
        return cls(np.asarray(u, dtype=float).reshape(-1, n_components(n_species)), n_species)

    @property
    def vector(self):
        return self.values.ravel()

    @property
    def pressure(self):
        return self.values[:, P]

    @property
    def velocity(self):
        return self.values[:, V1:V2 + 1]

    @property
    def temperature(self):
        return self.values[:, TEMP]

    @property
    def mass_fractions(self):
        """Full ``(N, n_species)`` fractions including the closure species."""
        w = self.values[:, TEMP + 1:]
        return np.column_stack([w, 1.0 - w.sum(axis=1)])

    def density(self, mech: Mechanism, P_th=P_ATM):
        return P_th * molar_mass(mech, self.mass_fractions) / (GAS_CONSTANT * self.temperature)

    def copy(self):
        return SolutionState(self.values.copy(), self.n_species)

    def clip_fractions(self):
        """Clip transported fractions to [0, 1] keeping the closure non-negative.

        Returns the number of clipped entries.
        """
        w = self.values[:, TEMP + 1:]
        bad = int((w < 0).sum() + (w > 1).sum())
        w = np.clip(w, 0.0, 1.0)
        total = w.sum(axis=1)
        over = total > 1.0
        if over.any():
            w[over] /= total[over, None]
            bad += int(over.sum())
        self.values[:, TEMP + 1:] = w
        return bad


def molar_mass(mech: Mechanism, w_full):
    return 1.0 / (np.clip(w_full, 0.0, None) / mech.molar_masses).sum(axis=-1)


@dataclass
class BoundaryConditions:
    """Dirichlet data per component plus an optional pressure pin."""

    dirichlet: dict = field(default_factory=dict)   # component -> (nodes, values)
    pressure_pin: int | None = None

    def add(self, component, nodes, values):
        nodes = np.asarray(nodes, dtype=np.int64)
        values = np.broadcast_to(np.asarray(values, dtype=float), nodes.shape).copy()
        if component in self.dirichlet:
            old_n, old_v = self.dirichlet[component]
            keep = ~np.isin(old_n, nodes)
            nodes = np.concatenate([old_n[keep], nodes])
            values = np.concatenate([old_v[keep], values])
        self.dirichlet[component] = (nodes, values)

    def rows(self, n_c):
        """Flat row indices and prescribed values of all constrained unknowns."""
        idx, val = [], []
        for comp, (nodes, values) in sorted(self.dirichlet.items()):
            idx.append(nodes * n_c + comp)
            val.append(values)
        if self.pressure_pin is not None:
            idx.append(np.array([self.pressure_pin * n_c + P]))
            val.append(np.zeros(1))
        if not idx:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        return np.concatenate(idx), np.concatenate(val)

    def apply(self, values):
        """Write the prescribed values into ``values`` (N, n_c) in place."""
        for comp, (nodes, vals) in self.dirichlet.items():
            values[nodes, comp] = vals
        if self.pressure_pin is not None:
            values[self.pressure_pin, P] = 0.0
        return values


# ---------------------------------------------------------------------------
# stabilization
# ---------------------------------------------------------------------------

def _damp(re):
    return 1.0 / np.sqrt(1.0 + re * re)


def alpha_parameter(h_sharp, mu, V_ref):
    """``h#/(2V) Re/sqrt(1+Re^2)`` with ``Re = h# V / mu``."""
    re = h_sharp * V_ref / mu
    return h_sharp * h_sharp / (2.0 * mu) * _damp(re)


def delta_parameter(h_dir, rho, flux_norm, nu):
    """``h/(2s) Re/sqrt(1+Re^2)`` with ``Re = h |flux| / nu`` and speed ``s = |flux| / rho``.

    Written as ``h^2 rho / (2 nu sqrt(1+Re^2))``, which also covers zero flow.
    """
    re = h_dir * flux_norm / nu
    return h_dir * h_dir * rho / (2.0 * nu) * _damp(re)


def stabilization_parameters(geom: ElementGeometry, beta, beta_bar_norm, mu, nu, V_ref, rho=1.0):
    """``(alpha_K, delta_K, [delta_K_i])`` for one element.

    ``beta`` is the mass flux rho v, ``beta_bar_norm`` one flux norm per
    transport row (or a scalar used for all) and ``nu`` the matching
    diffusion coefficients.  The streamline speed of row i is
    ``|beta_bar_i| / rho``; for species rows this is ``|v|``.
    """
    if not all(np.atleast_1d(nu) > 0) or not mu > 0 or not V_ref > 0:
        raise ValueError("transport coefficients must be positive")
    bn = float(np.hypot(*np.asarray(beta, dtype=float)))
    a = float(alpha_parameter(geom.h_sharp, mu, V_ref))
    d = float(delta_parameter(geom.h_dir, rho, bn, mu))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    bb = np.broadcast_to(np.asarray(beta_bar_norm, dtype=float), nu.shape)
    di = [float(x) for x in delta_parameter(geom.h_dir, rho, bb, nu)]
    return a, d, di


# ---------------------------------------------------------------------------
# element kernels
# ---------------------------------------------------------------------------

def _dot(a, b):
    return a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]


def _gdot(grads, x):
    """``grad(phi_a) . x`` per element, shape (E, 3)."""
    return grads[:, :, 0] * x[:, 0, None] + grads[:, :, 1] * x[:, 1, None]


def _transport_local(area, grads, grad_w, beta_bar, nu, f, delta):
    """(E, 3) local rows of ``beta_bar.grad w - div(nu grad w) - f`` with streamline diffusion."""
    conv = _dot(beta_bar, grad_w)
    diff = _gdot(grads, grad_w) * nu[:, None]
    supg = _gdot(grads, beta_bar) * (delta * (conv - f))[:, None]
    return area[:, None] * ((conv - f)[:, None] / 3.0 + diff + supg)


def _scatter(tris, local, n):
    return np.bincount(tris.ravel(), local.ravel(), minlength=n)


class _Geometry:
    """Per-mesh quantities reused by every residual evaluation."""

    def __init__(self, mesh: TriangleMesh):
        if (mesh.signed_areas <= 0).any():
            raise TangledMeshError(np.flatnonzero(mesh.signed_areas <= 0))
        self.mesh = mesh
        self.tris = mesh.triangles
        self.area = mesh.areas
        self.grads = mesh.basis_gradients
        self.h_sharp = 2.0 * np.sqrt(self.area / np.pi)


# ---------------------------------------------------------------------------
# low-Mach system
# ---------------------------------------------------------------------------

class LowMachProblem:
    """Residual and Jacobian of the stabilized system on a (movable) mesh."""

    def __init__(self, mesh: TriangleMesh, mech: Mechanism, transport: TransportConfig,
                 bcs: BoundaryConditions | None = None, stabilize=True):
        if len(transport.diffusivity) != mech.n_species - 1:
            raise ValueError(f"need {mech.n_species - 1} diffusivities, got {len(transport.diffusivity)}")
        self.mech = mech
        self.transport = transport
        self.bcs = bcs or BoundaryConditions()
        self.stabilize = stabilize
        self.n_species = mech.n_species
        self.n_c = n_components(mech.n_species)
        self.set_mesh(mesh)

    def set_mesh(self, mesh: TriangleMesh):
        self.geom = _Geometry(mesh)
        self.mesh = mesh

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    # -- residual ---------------------------------------------------------
    def element_fields(self, U):
        """Centroid quantities used by the assembly (dict of arrays).

        ``U`` is either nodal ``(N, n_c)`` or already gathered per element
        ``(E, 3, n_c)``; every quantity depends only on the element's own
        vertex values.
        """
        g = self.geom
        mech, tr = self.mech, self.transport
        Ue = U if U.ndim == 3 else U[g.tris]
        if not np.isfinite(Ue).all():
            raise AssemblyError("non-finite state")
        Uc = Ue.mean(axis=1)
        grad = np.swapaxes(np.swapaxes(g.grads, 1, 2) @ Ue, 1, 2)   # (E, n_c, 2)
        T_c = Uc[:, TEMP]
        if (T_c <= 0).any():
            raise AssemblyError("non-positive temperature")
        w_red = Uc[:, TEMP + 1:]
        w_full = np.clip(np.column_stack([w_red, 1.0 - w_red.sum(axis=1)]), 0.0, 1.0)
        Mbar_c = molar_mass(mech, w_full)
        rho = tr.P_th * Mbar_c / (GAS_CONSTANT * T_c)
        w_v = Ue[:, :, TEMP + 1:]
        Mbar_v = 1.0 / ((w_v / mech.molar_masses[:-1]).sum(axis=2)
                        + (1.0 - w_v.sum(axis=2)) / mech.molar_masses[-1])
        grad_M = (g.grads * Mbar_v[:, :, None]).sum(axis=1)
        v = Uc[:, V1:V2 + 1]
        beta = rho[:, None] * v
        cp = w_full @ mech.specific_heats
        return dict(Uc=Uc, grad=grad, T=T_c, w=w_full, rho=rho, v=v, beta=beta, cp=cp,
                    m=grad_M / Mbar_c[:, None])

    def sources(self, T, w, rho):
        """Centroid ``f_0`` (heat release) and species mass sources ``f_i``."""
        mech = self.mech
        nu_r, nu_p, eff, *_, tb = mech._tables
        c = rho[:, None] * w / mech.molar_masses
        k = mech.rate_constants(T)
        rate = k * np.prod(c[:, None, :] ** nu_r[None], axis=2)
        if tb.any():
            rate = np.where(tb, rate * (c @ eff.T), rate)
        f = (rate @ (nu_p - nu_r)) * mech.molar_masses
        h = mech.formation_enthalpies + mech.specific_heats * (T[:, None] - T_REF)
        return -(h * f).sum(axis=1), f

    def element_residuals(self, Ue):
        """Local residual rows ``(E, 3, n_c)`` from element values ``(E, 3, n_c)``."""
        g = self.geom
        tr = self.transport
        e = self.element_fields(Ue)
        area, grads = g.area, g.grads
        grad = e["grad"]
        beta, rho, v = e["beta"], e["rho"], e["v"]
        gvec = np.asarray(tr.gravity, dtype=float)
        R = np.empty(Ue.shape)

        if self.stabilize:
            h_dir = streamline_lengths(self.mesh, v)
            alpha = alpha_parameter(g.h_sharp, tr.mu, tr.V_ref)
            delta = delta_parameter(h_dir, rho, np.hypot(*beta.T), tr.mu)
        else:
            h_dir = np.zeros(len(area))
            alpha = delta = np.zeros(len(area))

        # momentum strong residual (viscous term vanishes for P1)
        gv = grad[:, V1:V2 + 1]                                  # (E, 2, 2)
        conv_v = beta[:, None, 0] * gv[:, :, 0] + beta[:, None, 1] * gv[:, :, 1]
        r_mom = conv_v + grad[:, P] - rho[:, None] * gvec

        # continuity
        div_v = gv[:, 0, 0] + gv[:, 1, 1]
        l = 1.0 / (rho * e["T"])
        cont = div_v - l * _dot(beta, grad[:, TEMP]) + _dot(v, e["m"])
        local = area[:, None] * (cont[:, None] / 3.0
                                 + alpha[:, None] * _gdot(grads, r_mom))
        R[:, :, P] = local

        # momentum
        p_c = e["Uc"][:, P]
        b_phi = _gdot(grads, beta)
        for k in range(2):
            local = area[:, None] * ((conv_v[:, k] - rho * gvec[k])[:, None] / 3.0
                                     + tr.mu * _gdot(grads, gv[:, k])
                                     - p_c[:, None] * grads[:, :, k]
                                     + (delta * r_mom[:, k])[:, None] * b_phi)
            R[:, :, V1 + k] = local

        # temperature and species
        f0, f = self.sources(e["T"], e["w"], rho)
        bnorm = np.hypot(*beta.T)
        cp = e["cp"]
        if self.stabilize:
            d0 = delta_parameter(h_dir, rho, cp * bnorm, tr.conductivity) / cp
        else:
            d0 = np.zeros(len(area))
        local = _transport_local(area, grads, grad[:, TEMP], cp[:, None] * beta,
                                 np.full(len(area), tr.conductivity), f0, d0)
        R[:, :, TEMP] = local
        for i in range(self.n_species - 1):
            nu_i = rho * tr.diffusivity[i]
            di = delta_parameter(h_dir, rho, bnorm, nu_i) if self.stabilize else np.zeros(len(area))
            local = _transport_local(area, grads, grad[:, TEMP + 1 + i], beta, nu_i, f[:, i], di)
            R[:, :, TEMP + 1 + i] = local

        return R

    def residual(self, u):
        U = np.asarray(u, dtype=float).reshape(-1, self.n_c)
        local = self.element_residuals(U[self.geom.tris])
        tris = self.geom.tris
        R = np.column_stack([_scatter(tris, local[:, :, k], self.n_nodes) for k in range(self.n_c)])
        rows, vals = self.bcs.rows(self.n_c)
        R = R.ravel()
        R[rows] = U.ravel()[rows] - vals
        if not np.isfinite(R).all():
            raise AssemblyError("non-finite residual")
        return R

    # -- Jacobian ---------------------------------------------------------
    @cached_property
    def coloring(self):
        return distance2_coloring(self.mesh)

    def jacobian(self, u, typical=None):
        """Finite-difference Jacobian, element by element.

        Matches :func:`fd_jacobian` (same one-sided steps per node) but needs
        only ``3 n_c`` vectorized element evaluations instead of one global
        residual per color and component.
        """
        n_c = self.n_c
        U = np.asarray(u, dtype=float).reshape(-1, n_c)
        tris = self.geom.tris
        typ = np.ones(n_c) if typical is None else np.asarray(typical, dtype=float)
        eps = np.sqrt(np.finfo(float).eps) * np.maximum(np.abs(U), typ)
        eps = (U + eps) - U
        Ue = U[tris]
        L0 = self.element_residuals(Ue)
        E = len(tris)
        blocks = np.empty((E, 3, n_c, 3, n_c))     # d local[b, j] / d U[a, k]
        for a in range(3):
            for k in range(n_c):
                h = eps[tris[:, a], k]
                Up = Ue.copy()
                Up[:, a, k] += h
                blocks[:, :, :, a, k] = (self.element_residuals(Up) - L0) / h[:, None, None]
        row = (tris[:, :, None] * n_c + np.arange(n_c))            # (E, 3, n_c)
        rows = np.broadcast_to(row[:, :, :, None, None], blocks.shape).ravel()
        cols = np.broadcast_to(row[:, None, None, :, :], blocks.shape).ravel()
        N = U.size
        J = sparse.csr_matrix((blocks.ravel(), (rows, cols)), shape=(N, N))
        bc_rows, _ = self.bcs.rows(n_c)
        if len(bc_rows):
            keep = np.ones(N)
            keep[bc_rows] = 0.0
            J = sparse.diags(keep) @ J
            unit = np.zeros(N)
            unit[bc_rows] = 1.0
            J = (J + sparse.diags(unit)).tocsr()
        J.eliminate_zeros()
        return J

    def jacobian_colored(self, u, typical=None):
        return fd_jacobian(self.residual, u, self.mesh, self.n_c, self.coloring, typical)

    def mass_diagonal(self, capacity=None):
        """Lumped pseudo-time mass: 0 on pressure and Dirichlet rows.

        ``capacity`` (length n_c) weights the rows, e.g. rho and rho c_p, so
        that pseudo-time resembles physical time.
        """
        m = np.repeat(self.mesh.lumped_mass[:, None], self.n_c, axis=1)
        if capacity is not None:
            m = m * np.asarray(capacity, dtype=float)
        m[:, P] = 0.0
        m = m.ravel()
        rows, _ = self.bcs.rows(self.n_c)
        m[rows] = 0.0
        return m


def assemble_residual(mesh, state: SolutionState, transport, mech, bcs=None):
    return LowMachProblem(mesh, mech, transport, bcs).residual(state.vector)


def assemble_jacobian(mesh, state: SolutionState, transport, mech, coloring=None, bcs=None):
    prob = LowMachProblem(mesh, mech, transport, bcs)
    col = coloring if coloring is not None else prob.coloring
    return fd_jacobian(prob.residual, state.vector, mesh, prob.n_c, col)


# ---------------------------------------------------------------------------
# scalar convection-diffusion (frozen flow)
# ---------------------------------------------------------------------------

class ScalarTransportProblem:
    """``beta . grad u - div(nu grad u) = f`` with streamline diffusion and Dirichlet data.

    ``beta`` is a callable of points (E, 2) -> (E, 2) or a constant vector;
    ``source`` a callable of points or ``None``.  The streamline parameter uses
    unit density.
    """

    def __init__(self, mesh, beta, nu, source=None, dirichlet_nodes=None, dirichlet_values=None,
                 stabilize=True):
        self.mesh = mesh
        self.nu = float(nu)
        c = mesh.centroids
        b = beta(c) if callable(beta) else np.broadcast_to(np.asarray(beta, dtype=float), c.shape)
        self.beta = np.array(b, dtype=float)
        self.f = np.zeros(len(c)) if source is None else np.asarray(source(c), dtype=float)
        self.dn = np.zeros(0, dtype=np.int64) if dirichlet_nodes is None else np.asarray(dirichlet_nodes)
        self.dv = np.zeros(len(self.dn)) if dirichlet_values is None else np.asarray(dirichlet_values, dtype=float)
        if stabilize:
            h = streamline_lengths(mesh, self.beta)
            self.delta = delta_parameter(h, 1.0, np.hypot(*self.beta.T), self.nu)
        else:
            self.delta = np.zeros(len(c))

    def residual(self, u):
        m = self.mesh
        grad_u = np.einsum("ead,ea->ed", m.basis_gradients, np.asarray(u)[m.triangles])
        local = _transport_local(m.areas, m.basis_gradients, grad_u, self.beta,
                                 np.full(m.n_elements, self.nu), self.f, self.delta)
        R = _scatter(m.triangles, local, m.n_nodes)
        R[self.dn] = np.asarray(u)[self.dn] - self.dv
        return R

    def matrix(self):
        """The problem is affine: ``R(u) = K u - r``; returns ``(K, r)``."""
        m = self.mesh
        n = m.n_nodes
        r0 = -self.residual(np.zeros(n))
        rows, cols, vals = [], [], []
        g = m.basis_gradients
        area = m.areas
        conv = np.einsum("ed,ebd->eb", self.beta, g)                           # beta . grad phi_b
        diff = self.nu * np.einsum("ead,ebd->eab", g, g)
        supg = self.delta[:, None, None] * np.einsum("ea,eb->eab", conv, conv)
        local = area[:, None, None] * (conv[:, None, :] / 3.0 + diff + supg)
        tris = m.triangles
        K = sparse.csr_matrix((local.ravel(), (np.repeat(tris, 3, axis=1).ravel(),
                                               np.tile(tris, (1, 3)).ravel())), shape=(n, n)).tolil()
        for i in self.dn:
            K.rows[i] = [int(i)]
            K.data[i] = [1.0]
        return K.tocsr(), r0

    def solve(self):
        from scipy.sparse.linalg import spsolve
        K, r = self.matrix()
        return spsolve(K.tocsc(), r)


# ---------------------------------------------------------------------------
# finite-difference Jacobian with graph coloring
# ---------------------------------------------------------------------------

def distance2_coloring(mesh: TriangleMesh):
    """Greedy coloring where nodes within two edges of each other differ.

    Perturbing one color changes rows only within the closed 1-ring of each
    colored node, and these rings do not overlap.
    """
    A = mesh.adjacency
    A2 = (A @ A).tocsr()
    n = mesh.n_nodes
    color = np.full(n, -1)
    order = np.argsort(-np.diff(A2.indptr), kind="stable")
    for i in order:
        used = color[A2.indices[A2.indptr[i]:A2.indptr[i + 1]]]
        c = 0
        taken = set(used[used >= 0].tolist())
        while c in taken:
            c += 1
        color[i] = c
    return color


def fd_jacobian(residual, u, mesh: TriangleMesh, n_c, coloring=None, typical=None):
    """One-sided finite-difference Jacobian over colored unknown groups."""
    u = np.asarray(u, dtype=float)
    coloring = distance2_coloring(mesh) if coloring is None else coloring
    n = mesh.n_nodes
    U = u.reshape(n, n_c)
    typ = np.ones(n_c) if typical is None else np.asarray(typical, dtype=float)
    eps = np.sqrt(np.finfo(float).eps) * np.maximum(np.abs(U), typ)
    eps = (U + eps) - U
    R0 = residual(u).reshape(n, n_c)
    A = mesh.adjacency.tocoo()
    a_rows, b_cols = A.row, A.col          # row node a is affected by column node b
    out_r, out_c, out_v = [], [], []
    comp = np.arange(n_c)
    for c in range(int(coloring.max()) + 1):
        nodes = np.flatnonzero(coloring == c)
        sel = coloring[b_cols] == c
        ra, cb = a_rows[sel], b_cols[sel]
        for k in range(n_c):
            Up = U.copy()
            Up[nodes, k] += eps[nodes, k]
            dR = residual(Up.ravel()).reshape(n, n_c) - R0
            out_r.append((ra[:, None] * n_c + comp).ravel())
            out_c.append(np.repeat(cb * n_c + k, n_c))
            out_v.append((dR[ra] / eps[cb, k][:, None]).ravel())
    N = n * n_c
    J = sparse.csr_matrix((np.concatenate(out_v), (np.concatenate(out_r), np.concatenate(out_c))),
                          shape=(N, N))
    return J


def evaluate_qoi_mean(mesh: TriangleMesh, values):
    """``(1/|Omega|) int values`` for the P1 field with the given nodal values."""
    values = np.asarray(values, dtype=float)
    return float((values[mesh.triangles].mean(axis=1) * mesh.areas).sum() / mesh.areas.sum())
