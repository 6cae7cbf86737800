"""Nodal derivative recovery for P1 fields.

First derivatives use area-weighted averaging of the element gradients over
each node star.  Second derivatives come from a least-squares quadratic fit
over a node patch (one ring, widened to two rings where the ring is too small
or rank deficient).  Both recoveries are linear in the data, so they are
assembled once per node layout as sparse operators.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .mesh import TriangleMesh

RANK_TOL = 1e-10


class RecoveryError(ValueError):
    def __init__(self, node, message):
        self.node = int(node)
        super().__init__(f"node {self.node}: {message}")


@dataclass(frozen=True)
class RecoveredField:
    values: np.ndarray  # (N, 2)
    order: int

    @property
    def norm(self):
        return np.hypot(self.values[:, 0], self.values[:, 1])


# ---------------------------------------------------------------------------
# first derivatives
# ---------------------------------------------------------------------------

def gradient_recovery_operators(mesh: TriangleMesh):
    """Sparse ``(Gx, Gy)`` mapping nodal values to recovered nodal gradients."""
    tris = mesh.triangles
    area = mesh.areas
    grads = mesh.basis_gradients
    star_area = np.bincount(tris.ravel(), np.repeat(area, 3), minlength=mesh.n_nodes)
    empty = np.flatnonzero(star_area <= 0.0)
    if empty.size:
        raise RecoveryError(empty[0], "empty node star")
    # node p receives area_K * grad(lambda_a) * u_a for each vertex p, a of K
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    out = []
    for d in range(2):
        vals = (area[:, None, None] * grads[:, None, :, d] / star_area[tris][:, :, None]).ravel()
        out.append(sparse.csr_matrix((vals, (rows, cols)), shape=(mesh.n_nodes,) * 2))
    return tuple(out)


def recover_gradient(mesh: TriangleMesh, u) -> RecoveredField:
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_nodes,):
        raise ValueError(f"expected {mesh.n_nodes} nodal values, got shape {u.shape}")
    gx, gy = gradient_recovery_operators(mesh)
    return RecoveredField(np.column_stack([gx @ u, gy @ u]), order=1)


# ---------------------------------------------------------------------------
# quadratic patch fits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchFit:
    """Sparse derivative operators from least-squares quadratic patch fits.

    Each attribute is an ``(N, N)`` matrix that maps nodal values to the
    derivative of the fitted quadratic at the patch center.
    """

    dx: sparse.csr_matrix
    dy: sparse.csr_matrix
    dxx: sparse.csr_matrix
    dxy: sparse.csr_matrix
    dyy: sparse.csr_matrix
    patches: list
    widened: np.ndarray

    def apply(self, u):
        """All five derivatives of ``u``; trailing axes of ``u`` are kept."""
        u = np.asarray(u, dtype=float)
        return {k: getattr(self, k) @ u for k in ("dx", "dy", "dxx", "dxy", "dyy")}


def _two_ring(neighbors, ring):
    return np.unique(np.concatenate([neighbors[j] for j in ring]))


def _fit_batch(points, centers, patches):
    size = max(len(p) for p in patches)
    n = len(centers)
    idx = np.empty((n, size), dtype=np.int64)
    mask = np.zeros((n, size), dtype=bool)
    for r, p in enumerate(patches):
        idx[r, :len(p)] = p
        idx[r, len(p):] = centers[r]
        mask[r, :len(p)] = True
    d = points[idx] - points[centers][:, None, :]
    scale = np.sqrt((d ** 2).sum(axis=2)).max(axis=1)
    scale[scale == 0.0] = 1.0
    d /= scale[:, None, None]
    v = np.stack([np.ones_like(d[..., 0]), d[..., 0], d[..., 1],
                  d[..., 0] ** 2, d[..., 0] * d[..., 1], d[..., 1] ** 2], axis=2)
    v *= mask[..., None]
    u, s, vt = np.linalg.svd(v, full_matrices=False)
    ok = s[:, -1] > RANK_TOL * s[:, 0]
    s_inv = np.where(s > RANK_TOL * s[:, :1], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    pinv = np.einsum("nji,nj,npj->nip", vt, s_inv, u)  # (n, 6, size)
    return idx, mask, scale, pinv, ok


def quadratic_fit_operators(mesh: TriangleMesh, points=None, min_patch=6) -> PatchFit:
    """Build :class:`PatchFit` operators for the node layout ``points``.

    ``points`` defaults to the mesh nodes; pass the computational coordinates
    to differentiate with respect to them.
    """
    pts = mesh.nodes if points is None else np.asarray(points, dtype=float)
    nbrs = mesh.neighbors
    n = mesh.n_nodes
    patches = [nbrs[i] for i in range(n)]
    widened = np.zeros(n, dtype=bool)
    for i in range(n):
        if len(patches[i]) < min_patch:
            patches[i] = _two_ring(nbrs, patches[i])
            widened[i] = True
    centers = np.arange(n)
    idx, mask, scale, pinv, ok = _fit_batch(pts, centers, patches)
    retry = np.flatnonzero(~ok & ~widened)
    if retry.size:
        for i in retry:
            patches[i] = _two_ring(nbrs, patches[i])
            widened[i] = True
        ridx, rmask, rscale, rpinv, rok = _fit_batch(pts, retry, [patches[i] for i in retry])
        size = max(idx.shape[1], ridx.shape[1])
        idx, mask, pinv = _pad(idx, mask, pinv, size)
        ridx, rmask, rpinv = _pad(ridx, rmask, rpinv, size)
        idx[retry], mask[retry], pinv[retry], scale[retry] = ridx, rmask, rpinv, rscale
        ok[retry] = rok
    if not ok.all():
        bad = np.flatnonzero(~ok)[0]
        raise RecoveryError(bad, "rank-deficient quadratic patch after widening")
    rows = np.repeat(centers, idx.shape[1])
    cols = idx.ravel()
    factors = {"dx": (1, 1.0), "dy": (2, 1.0), "dxx": (3, 2.0), "dxy": (4, 1.0), "dyy": (5, 2.0)}
    ops = {}
    for name, (coef, mult) in factors.items():
        power = 1 if coef < 3 else 2
        w = mult * pinv[:, coef, :] / scale[:, None] ** power
        w = np.where(mask, w, 0.0)
        ops[name] = sparse.csr_matrix((w.ravel(), (rows, cols)), shape=(n, n))
    return PatchFit(patches=patches, widened=widened, **ops)


def _pad(idx, mask, pinv, size):
    extra = size - idx.shape[1]
    if extra == 0:
        return idx, mask, pinv
    idx = np.concatenate([idx, np.repeat(idx[:, :1], extra, axis=1)], axis=1)
    mask = np.concatenate([mask, np.zeros((len(mask), extra), dtype=bool)], axis=1)
    pinv = np.concatenate([pinv, np.zeros(pinv.shape[:2] + (extra,))], axis=2)
    return idx, mask, pinv


def recover_second_derivatives(mesh: TriangleMesh, u, fit: PatchFit | None = None) -> RecoveredField:
    """Nodal ``(d2u/dx1^2, d2u/dx2^2)`` from quadratic patch fits."""
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_nodes,):
        raise ValueError(f"expected {mesh.n_nodes} nodal values, got shape {u.shape}")
    fit = fit or quadratic_fit_operators(mesh)
    return RecoveredField(np.column_stack([fit.dxx @ u, fit.dyy @ u]), order=2)


def interpolation_error_indicator(mesh: TriangleMesh, u, fit: PatchFit | None = None):
    """Per-node ``|D2 u|`` (Euclidean norm of the recovered pure second derivatives)."""
    return recover_second_derivatives(mesh, u, fit).norm


# ---------------------------------------------------------------------------
# interpolation error in the H1 seminorm
# ---------------------------------------------------------------------------

# Dunavant's 7-point rule, exact for polynomials of degree 5 (barycentric, weights sum to 1)
_A1, _B1 = 0.059715871789770, 0.470142064105115
_A2, _B2 = 0.797426985353087, 0.101286507323456
QUAD7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
QUAD7_WEIGHTS = np.array([0.225] + [0.132394152788506] * 3 + [0.125939180544827] * 3)


def quadrature_points(mesh: TriangleMesh, bary=QUAD7_BARY):
    """Physical quadrature points, shape ``(E, q, 2)``."""
    return np.einsum("qa,ead->eqd", bary, mesh.nodes[mesh.triangles])


def h1_interpolation_error(mesh: TriangleMesh, grad_exact, u_nodal):
    """``|u - I_h u|_{H^1}`` for the P1 interpolant with nodal values ``u_nodal``.

    ``grad_exact(x)`` takes points of shape ``(..., 2)`` and returns gradients
    of the same shape.
    """
    xq = quadrature_points(mesh)
    gh = np.einsum("ea,ead->ed", np.asarray(u_nodal)[mesh.triangles], mesh.basis_gradients)
    diff = grad_exact(xq) - gh[:, None, :]
    local = (diff ** 2).sum(axis=2) @ QUAD7_WEIGHTS * mesh.areas
    return float(np.sqrt(local.sum()))


def l2_error(mesh: TriangleMesh, exact, u_nodal):
    """``||u - u_h||_{L^2}`` with ``u_h`` the P1 field of ``u_nodal``."""
    xq = quadrature_points(mesh)
    uh = np.einsum("qa,ea->eq", QUAD7_BARY, np.asarray(u_nodal)[mesh.triangles])
    local = ((exact(xq) - uh) ** 2) @ QUAD7_WEIGHTS * mesh.areas
    return float(np.sqrt(local.sum()))
