"""Linearly implicit Rosenbrock pseudo-time marching for ``P du/dt + F(u) = 0``.

Stages use the transformed form (no Jacobian-vector products): with
``Gamma = (gamma_ij)``, ``a = alpha Gamma^-1``, ``c = diag(1/gamma) - Gamma^-1``
and ``m = b^T Gamma^-1`` each stage solves

    (M / (gamma dt) + J) U_i = -F(u + sum_j a_ij U_j) + M sum_j (c_ij / dt) U_j

and ``u_new = u + sum_i m_i U_i``.  One factorization per step serves all
stages.  Rows of ``M`` that vanish (algebraic unknowns) keep their full
Jacobian rows, which is the index-1 DAE contract.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

logger = logging.getLogger(__name__)


class StepFailure(RuntimeError):
    """Stage matrix could not be factorized or produced non-finite stages."""


class MarchNotConverged(RuntimeError):
    def __init__(self, message, u, history):
        super().__init__(message)
        self.u = u
        self.history = history


@dataclass(frozen=True)
class RosenbrockTableau:
    name: str
    gamma_diag: float
    alpha: np.ndarray          # (s, s) strictly lower
    gamma: np.ndarray          # (s, s) strictly lower, off-diagonal only
    b: np.ndarray
    b_hat: np.ndarray
    order: int
    embedded_order: int
    stiffly_accurate: bool = False

    @property
    def stages(self):
        return len(self.b)

    @property
    def full_gamma(self):
        return self.gamma + self.gamma_diag * np.eye(self.stages)

    def transformed(self):
        """``(a, c, m, m_hat)`` of the transformed stage form."""
        G = self.full_gamma
        Gi = np.linalg.inv(G)
        a = self.alpha @ Gi
        c = np.diag(1.0 / np.diag(G)) - Gi
        return a, c, self.b @ Gi, self.b_hat @ Gi

    def order_residuals(self, weights=None):
        """Residuals of the order conditions up to order 3 for ``weights`` (default ``b``).

        Conditions (beta = alpha + Gamma_offdiag, beta'_i = sum_j beta_ij,
        alpha_i = sum_j alpha_ij): sum b = 1; sum b beta' = 1/2 - gamma;
        sum b alpha^2 = 1/3; sum b beta beta' = 1/6 - gamma + gamma^2.
        """
        w = self.b if weights is None else np.asarray(weights)
        g = self.gamma_diag
        beta = self.alpha + self.gamma
        bp = beta.sum(axis=1)
        ai = self.alpha.sum(axis=1)
        return np.array([
            w.sum() - 1.0,
            w @ bp - (0.5 - g),
            w @ ai ** 2 - 1.0 / 3.0,
            w @ (beta @ bp) - (1.0 / 6.0 - g + g * g),
        ])

    def stability_function(self, z):
        """``R(z)`` for the scalar test equation ``u' = z u``."""
        G = self.full_gamma
        s = self.stages
        # stage increments k solve (I - z(alpha + Gamma)) k = z 1
        k = np.linalg.solve(np.eye(s) - z * (self.alpha + G), z * np.ones(s))
        return 1.0 + self.b @ k


def ros3pl() -> RosenbrockTableau:
    """Four-stage, order 3(2), L-stable, stiffly accurate Rosenbrock method for DAEs."""
    g = 0.4358665215084590
    alpha = np.zeros((4, 4))
    alpha[1, 0] = 0.87173304301691801
    alpha[2, 0] = 0.84457060015369423
    alpha[2, 1] = -0.11299064236484185
    alpha[3, 2] = 1.0
    gam = np.zeros((4, 4))
    gam[1, 0] = -0.87173304301691801
    gam[2, 0] = -0.90338057013044082
    gam[2, 1] = 0.054180672388095326
    gam[3, 0] = 0.24212380706095346
    gam[3, 1] = -1.2232505839045147
    gam[3, 2] = 0.54526025533510214
    b = np.array([0.24212380706095346, -1.2232505839045147, 1.5452602553351020, g])
    b_hat = np.array([0.37810903145819369, -0.096042292212423178, 0.5, 0.2179332607542295])
    return RosenbrockTableau("ros3pl", g, alpha, gam, b, b_hat, 3, 2, True)


TABLEAUS = {"ros3pl": ros3pl}


def get_tableau(name="ros3pl") -> RosenbrockTableau:
    try:
        return TABLEAUS[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown Rosenbrock tableau {name!r}; known: {sorted(TABLEAUS)}") from None


def _as_mass(M, n):
    if M is None:
        return sparse.identity(n, format="csr")
    if sparse.issparse(M):
        return M.tocsr()
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return sparse.diags(M, format="csr")
    return sparse.csr_matrix(M)


def scaled_norm(e, u, atol, rtol):
    """Max norm of ``e / (atol + rtol |u|)``."""
    # atol may be a per-unknown array; np.inf entries drop an unknown from the norm
    return float(np.max(np.abs(e) / (atol + rtol * np.abs(u)), initial=0.0))


def rosenbrock_step(F: Callable, J, M, u, dt, tableau: RosenbrockTableau | None = None,
                    atol=1e-4, rtol=1e-2):
    """One Rosenbrock step for ``M du/dt = -F(u)``.

    ``J`` is ``dF/du`` at ``u`` (sparse or dense matrix), ``M`` a matrix or
    the diagonal of one.  Returns ``(u_new, err)`` where ``err`` is the
    scaled max norm of the embedded difference.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    tab = tableau or ros3pl()
    u = np.asarray(u, dtype=float)
    n = u.size
    Mm = _as_mass(M, n)
    Jm = sparse.csc_matrix(J) if not sparse.issparse(J) else J.tocsc()
    a, c, m, m_hat = tab.transformed()
    K = (Mm / (tab.gamma_diag * dt) + Jm).tocsc()
    try:
        lu = spla.splu(K)
    except RuntimeError as exc:
        raise StepFailure(f"stage matrix is singular: {exc}") from None
    U = np.zeros((tab.stages, n))
    for i in range(tab.stages):
        y = u + a[i, :i] @ U[:i]
        try:
            rhs = -np.asarray(F(y), dtype=float)
        except (ValueError, ArithmeticError) as exc:
            # stage state left the admissible set (e.g. T <= 0); caller shrinks dt
            raise StepFailure(f"residual failed at stage {i}: {exc}") from None
        if i:
            rhs += Mm @ ((c[i, :i] / dt) @ U[:i])
        U[i] = lu.solve(rhs)
        if not np.isfinite(U[i]).all():
            raise StepFailure(f"non-finite stage {i}")
    u_new = u + m @ U
    err = scaled_norm((m - m_hat) @ U, np.maximum(np.abs(u), np.abs(u_new)), atol, rtol)
    return u_new, err


def adapt_step(err, dt, p_hat=2, dt_min=0.0, dt_max=np.inf):
    """Step-size controller; returns ``(dt_new, accepted)``."""
    if err < 0:
        raise ValueError("error estimate must be non-negative")
    fac = 5.0 if err == 0 else min(5.0, max(0.2, 0.9 * err ** (-1.0 / (p_hat + 1))))
    return float(np.clip(dt * fac, dt_min, dt_max)), bool(err <= 1.0)


@dataclass
class MarchConfig:
    rtol: float = 1e-2
    atol: float | np.ndarray = 1e-4   # per-unknown array allowed; inf drops an unknown from the error norm
    dt0: float = 1e-4
    dt_min: float = 1e-12
    dt_max: float = 1e3
    steady_tol: float = 1e-6
    max_steps: int = 1000
    projection: np.ndarray | None = None
    residual_scale: np.ndarray | float = 1.0
    tableau: str = "ros3pl"

    def __post_init__(self):
        if not (self.rtol > 0 and np.all(np.asarray(self.atol) > 0) and self.steady_tol > 0):
            raise ValueError("tolerances must be positive")
        if not 0 < self.dt_min <= self.dt0 <= self.dt_max:
            raise ValueError("need 0 < dt_min <= dt0 <= dt_max")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class StepRecord:
    step: int
    t: float
    dt: float
    err: float
    residual: float
    accepted: bool


@dataclass
class MarchHistory:
    records: list = field(default_factory=list)
    converged: bool = False

    @property
    def accepted(self):
        return [r for r in self.records if r.accepted]

    @property
    def residuals(self):
        return np.array([r.residual for r in self.accepted])


def project_initial(F: Callable, J, M, u, dt):
    """One linearly implicit Euler step ``(M/dt + J) du = -F(u)``, accepted unconditionally.

    Makes a start value consistent with the algebraic rows (e.g. a velocity
    guess that violates the continuity constraint) before error-controlled
    marching; otherwise the embedded estimate sees an O(1) jump at any dt.
    """
    u = np.asarray(u, dtype=float)
    Mm = _as_mass(M, u.size)
    Jm = sparse.csc_matrix(J) if not sparse.issparse(J) else J.tocsc()
    try:
        du = spla.splu((Mm / dt + Jm).tocsc()).solve(-np.asarray(F(u), dtype=float))
    except RuntimeError as exc:
        raise StepFailure(f"projection matrix is singular: {exc}") from None
    if not np.isfinite(du).all():
        raise StepFailure("non-finite projection step")
    return u + du


def march_to_steady(F: Callable, J: Callable, M, u0, cfg: MarchConfig | None = None,
                    on_step: Callable | None = None, raise_on_failure=False,
                    is_steady: Callable | None = None):
    """Pseudo-time march until ``max |F(u) / scale| < steady_tol``.

    ``J(u)`` returns the Jacobian; ``M`` is the mass matrix (``None`` uses the
    projection diagonal from ``cfg``).  ``on_step(u, record)`` runs after each
    accepted step and may return a replacement state (the driver moves the
    mesh there).  Returns ``(u, history)``.
    """
    cfg = cfg or MarchConfig()
    tab = get_tableau(cfg.tableau)
    u = np.array(u0, dtype=float)
    if M is None:
        M = np.ones(u.size) if cfg.projection is None else np.asarray(cfg.projection, dtype=float)
    hist = MarchHistory()
    steady = is_steady or (lambda r: r < cfg.steady_tol)
    res = _residual(F, u, cfg)
    if steady(res):
        hist.converged = True
        return u, hist
    dt = cfg.dt0
    t = 0.0
    n_acc = 0
    n_try = 0
    while n_acc < cfg.max_steps:
        n_try += 1
        try:
            u_new, err = rosenbrock_step(F, J(u), M, u, dt, tab, cfg.atol, cfg.rtol)
        except StepFailure as exc:
            logger.debug("step failure at dt=%.3e: %s", dt, exc)
            if dt <= cfg.dt_min:
                break
            dt = max(0.25 * dt, cfg.dt_min)
            continue
        dt_next, ok = adapt_step(err, dt, tab.embedded_order, cfg.dt_min, cfg.dt_max)
        if not ok and dt > cfg.dt_min:
            hist.records.append(StepRecord(n_try, t, dt, err, res, False))
            dt = dt_next
            continue
        t += dt
        n_acc += 1
        u = u_new
        res = _residual(F, u, cfg)
        rec = StepRecord(n_try, t, dt, err, res, True)
        hist.records.append(rec)
        logger.debug("step %d t=%.4e dt=%.3e err=%.3e |F|=%.3e", n_acc, t, dt, err, res)
        if on_step is not None:
            replaced = on_step(u, rec)
            if replaced is not None:
                u = np.asarray(replaced, dtype=float)
                res = _residual(F, u, cfg)
                rec.residual = res
        if steady(res):
            hist.converged = True
            return u, hist
        dt = dt_next
    msg = f"no steady state after {n_acc} accepted steps (scaled residual {res:.3e})"
    logger.warning(msg)
    if raise_on_failure:
        raise MarchNotConverged(msg, u, hist)
    return u, hist


def _residual(F, u, cfg):
    r = np.asarray(F(u), dtype=float) / cfg.residual_scale
    if not np.isfinite(r).all():
        return np.inf
    return float(np.abs(r).max(initial=0.0))
