"""Anisotropic monitor functions built from a nodal vector field.

The monitor at each node is ``G = l1 v1 v1^T + l2 v2 v2^T`` with ``v1`` along
the driving vector ``psi``, ``l1 = sqrt(1 + alpha |psi|^2)`` and
``l2 = 1 / l1``.  Nodal matrices are stored as ``(N, 2, 2)`` arrays.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .mesh import TriangleMesh

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 80.0
DEFAULT_SMOOTHING_CYCLES = 8


class MonitorError(ValueError):
    pass


@dataclass(frozen=True)
class MonitorField:
    G: np.ndarray
    alpha: float
    smoothing_cycles: int = 0

    @property
    def n_nodes(self):
        return self.G.shape[0]

    def inverse(self):
        return inverse_2x2(self.G)

    def scaled(self, c):
        return replace(self, G=self.G * c)


def identity_monitor(n_nodes, alpha=DEFAULT_ALPHA):
    return MonitorField(np.broadcast_to(np.eye(2), (n_nodes, 2, 2)).copy(), alpha)


def inverse_2x2(G):
    det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
    inv = np.empty_like(G)
    inv[:, 0, 0] = G[:, 1, 1]
    inv[:, 1, 1] = G[:, 0, 0]
    inv[:, 0, 1] = -G[:, 0, 1]
    inv[:, 1, 0] = -G[:, 1, 0]
    return inv / det[:, None, None]


def build_monitor(psi, alpha=DEFAULT_ALPHA, normalize_psi=True, psi_floor=0.0) -> MonitorField:
    """Monitor field from nodal vectors ``psi`` of shape ``(N, 2)``.

    With ``normalize_psi`` the field is first divided by
    ``max(largest nodal norm, psi_floor)`` so that ``alpha`` does not depend
    on units or mesh size; the floor keeps round-off in a flat field from
    being blown up to full strength.  Nodes where ``|psi|`` falls below
    ``1e-12`` times the divisor get the identity.
    """
    if not alpha > 0:
        raise MonitorError(f"alpha must be positive, got {alpha}")
    psi = np.asarray(psi, dtype=float)
    if psi.ndim != 2 or psi.shape[1] != 2:
        raise MonitorError(f"psi must have shape (N, 2), got {psi.shape}")
    if not np.isfinite(psi).all():
        raise MonitorError("psi contains non-finite values")
    norm = np.hypot(psi[:, 0], psi[:, 1])
    peak = norm.max(initial=0.0)
    eps = 1e-12 * peak if peak > 0 else 1e-300
    if psi_floor < 0:
        raise MonitorError("psi_floor must be non-negative")
    if normalize_psi and max(peak, psi_floor) > 0:
        peak = max(peak, psi_floor)
        psi = psi / peak
        norm = norm / peak
        eps = 1e-12
    live = norm >= eps
    v1 = np.zeros_like(psi)
    v1[live] = psi[live] / norm[live, None]
    v1[~live] = (1.0, 0.0)
    v2 = np.column_stack([-v1[:, 1], v1[:, 0]])
    l1 = np.where(live, np.sqrt(1.0 + alpha * norm ** 2), 1.0)
    l2 = 1.0 / l1
    G = (l1[:, None, None] * v1[:, :, None] * v1[:, None, :]
         + l2[:, None, None] * v2[:, :, None] * v2[:, None, :])
    G[~live] = np.eye(2)
    return MonitorField(G, float(alpha))


def eigen_decomposition(G):
    """Eigenvalues (descending) and eigenvectors (columns) of symmetric 2x2 stacks."""
    w, v = np.linalg.eigh(0.5 * (G + np.swapaxes(G, 1, 2)))
    return w[:, ::-1], v[:, :, ::-1]


def smoothing_operator(mesh: TriangleMesh) -> sparse.csr_matrix:
    """Star average with exact P1 quadrature on the (computational) mesh.

    Row ``p`` of the result gives ``int_C(p) g / |C(p)|`` for a P1 field g,
    where ``C(p)`` is the union of elements touching ``p``.
    """
    tris = mesh.triangles
    area = mesh.areas
    star = np.bincount(tris.ravel(), np.repeat(area, 3), minlength=mesh.n_nodes)
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    vals = np.repeat(area / 3.0, 9) / star[rows]
    return sparse.csr_matrix((vals, (rows, cols)), shape=(mesh.n_nodes,) * 2)


def project_unit_determinant(G):
    """Keep eigenvectors, reset eigenvalues to ``(r, 1/r)`` with ``r = sqrt(l1/l2)``."""
    w, v = eigen_decomposition(G)
    if (w[:, 1] <= 0).any():
        raise MonitorError("monitor lost positive definiteness during smoothing")
    r = np.sqrt(w[:, 0] / w[:, 1])
    return (r[:, None, None] * v[:, :, 0, None] * v[:, None, :, 0]
            + (1.0 / r)[:, None, None] * v[:, :, 1, None] * v[:, None, :, 1])


def smooth_monitor(monitor: MonitorField, mesh_computational: TriangleMesh, cycles=DEFAULT_SMOOTHING_CYCLES,
                   reproject=True, operator=None) -> MonitorField:
    """Apply ``cycles`` rounds of star averaging over the computational mesh.

    Entries are averaged independently; with ``reproject`` each cycle ends by
    restoring ``det G = 1`` node-wise.
    """
    if cycles < 0:
        raise MonitorError("number of smoothing cycles must be >= 0")
    if cycles == 0:
        return monitor
    S = operator if operator is not None else smoothing_operator(mesh_computational)
    flat = monitor.G.reshape(-1, 4)
    for _ in range(cycles):
        flat = S @ flat
        G = flat.reshape(-1, 2, 2)
        G = 0.5 * (G + np.swapaxes(G, 1, 2))
        if reproject:
            G = project_unit_determinant(G)
        flat = G.reshape(-1, 4)
    return MonitorField(flat.reshape(-1, 2, 2).copy(), monitor.alpha,
                        monitor.smoothing_cycles + cycles)


def monitor_density(monitor: MonitorField | np.ndarray):
    """Nodal ``sqrt(det G)``."""
    G = monitor.G if isinstance(monitor, MonitorField) else np.asarray(monitor)
    det = G[:, 0, 0] * G[:, 1, 1] - G[:, 0, 1] * G[:, 1, 0]
    if (det <= 0).any():
        raise MonitorError(f"non-SPD monitor at node {int(np.flatnonzero(det <= 0)[0])}")
    return np.sqrt(det)
