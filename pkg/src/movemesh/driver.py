"""Case setup, the coupled physics/mesh iteration and the command line.

The coupled run is staggered: after every accepted Rosenbrock step of the
flow/chemistry system the monitor is rebuilt from the current solution,
the mesh takes a few MMPDE steps and the nodal values, which ride with the
nodes, receive the ALE correction ``u += P (dx . grad u)`` for the realized
displacement.  Configuration is INI; see ``data/ozone.ini`` for an
annotated example.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .chemistry import GAS_CONSTANT, P_ATM, Mechanism, MechanismError, load_mechanism
from .femsolver import (P, TEMP, V1, V2, BoundaryConditions, LowMachProblem, SolutionState,
                        TransportConfig, evaluate_qoi_mean, n_components)
from .mesh import MeshError, TriangleMesh, mesh_quality, read_triangle_files, rectangle_mesh, write_vtk
from .mmpde import (MeshMapping, MeshStallError, ale_convective_term, equidistribution_oracle,
                    relax_mesh, step_mesh, stratified_monitor)
from .monitor import MonitorError, build_monitor, monitor_density, smooth_monitor, smoothing_operator
from .recovery import quadratic_fit_operators, recover_gradient
from .timeint import MarchConfig, StepFailure, march_to_steady, project_initial

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
REFERENCE_QOI = 0.03350442   # published mean O3 fraction, D2 monitor; metadata only


class ConfigError(ValueError):
    pass


def data_path(name) -> Path:
    """Path of a file shipped in ``movemesh/data``."""
    return Path(str(resources.files("movemesh") / "data" / name))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class CaseConfig:
    name: str = "ozone"
    # domain and mesh (node/ele files override the generated rectangle)
    length: float = 0.02
    height: float = 0.005
    nx: int = 134
    ny: int = 20
    pattern: str = "right"
    node_file: str | None = None
    ele_file: str | None = None
    # chemistry and transport
    mechanism: str = "ozone.mech"
    P_th: float = P_ATM
    mu: float = 7.5e-5
    conductivity: float = 0.107
    diffusivity: tuple = (7.6e-5, 7.6e-5)
    V_ref: float = 0.25
    stabilize: bool = True
    # boundary and initial data
    inflow_peak: float = 0.25
    T_base: float = 298.0
    T_peak: float = 800.0
    T_center: float = 0.005
    T_sharpness: float = 1e5
    inflow_fractions: dict = field(default_factory=lambda: {"O2": 0.8, "O3": 0.2})
    chemistry: bool = True
    # monitor
    monitor_field: str = "O3"
    monitor_order: int = 2
    alpha: float = 80.0
    smoothing_cycles: int = 8
    # MMPDE
    move_mesh: bool = True
    tau: float = 1.0
    mesh_substeps: int = 2
    mesh_dt_factor: float = 50.0
    mesh_scheme: str = "implicit"
    mesh_tol: float = 1e-8
    mesh_dt_growth_cap: float = 1e3
    # pseudo-time marching
    rtol: float = 5e-2
    atol: float = 1e-3
    dt0: float = 1e-4
    dt_min: float = 1e-12
    dt_max: float = 100.0
    steady_tol: float = 1e-4
    stage1_max_steps: int = 300
    stage2_max_steps: int = 2000
    # output
    output_dir: str = "output"
    vtk_every: int = 0
    base_dir: str = "."

    def __post_init__(self):
        if self.monitor_order not in (1, 2):
            raise ConfigError(f"monitor order must be 1 or 2, got {self.monitor_order}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.smoothing_cycles < 0 or self.mesh_substeps < 0:
            raise ConfigError("smoothing cycles and mesh substeps must be >= 0")
        if not (self.length > 0 and self.height > 0 and self.nx > 0 and self.ny > 0):
            raise ConfigError("domain size and mesh resolution must be positive")
        if not (self.mu > 0 and self.conductivity > 0 and all(d > 0 for d in self.diffusivity)):
            raise ConfigError("transport coefficients must be positive")
        if not self.mesh_dt_growth_cap >= 1:
            raise ConfigError("mesh_dt_growth_cap must be >= 1")
        if (self.node_file is None) != (self.ele_file is None):
            raise ConfigError("node_file and ele_file must be given together")

    def resolve(self, name) -> Path:
        """Config-relative path, falling back to the shipped data directory."""
        p = Path(name)
        if not p.is_absolute():
            local = Path(self.base_dir) / p
            p = local if local.exists() or not data_path(name).exists() else data_path(name)
        return p

    def check_files(self):
        for name in (self.mechanism, self.node_file, self.ele_file):
            if name is not None and not self.resolve(name).is_file():
                raise FileNotFoundError(f"referenced file not found: {self.resolve(name)}")


# INI section -> keys; every key maps onto a CaseConfig field of the same name
_SECTIONS = {
    "case": ("name",),
    "mesh": ("length", "height", "nx", "ny", "pattern", "node_file", "ele_file"),
    "chemistry": ("mechanism", "P_th", "chemistry"),
    "transport": ("mu", "conductivity", "diffusivity", "V_ref", "stabilize"),
    "boundary": ("inflow_peak", "T_base", "T_peak", "T_center", "T_sharpness", "inflow_fractions"),
    "monitor": ("monitor_field", "monitor_order", "alpha", "smoothing_cycles"),
    "mmpde": ("move_mesh", "tau", "mesh_substeps", "mesh_dt_factor", "mesh_scheme", "mesh_tol",
              "mesh_dt_growth_cap"),
    "march": ("rtol", "atol", "dt0", "dt_min", "dt_max", "steady_tol", "stage1_max_steps",
              "stage2_max_steps"),
    "output": ("output_dir", "vtk_every"),
}


def _convert(name, raw, default):
    try:
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "yes", "true", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(t) for t in raw.replace(",", " ").split())
        if isinstance(default, dict):
            out = {}
            for item in raw.split(","):
                key, val = item.split("=")
                out[key.strip()] = float(val)
            return out
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw.strip()


def parse_config(text: str, base_dir=".") -> CaseConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    defaults = CaseConfig()
    kwargs = {"base_dir": str(base_dir)}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            kwargs[key] = _convert(key, raw, getattr(defaults, key))
    return CaseConfig(**kwargs)


def load_config(path) -> CaseConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), path.parent)


# ---------------------------------------------------------------------------
# ozone channel
# ---------------------------------------------------------------------------

@dataclass
class OzoneCase:
    mesh: TriangleMesh
    state: SolutionState
    mech: Mechanism
    transport: TransportConfig
    bcs: BoundaryConditions
    capacity: np.ndarray     # pseudo-time weight per component
    typical: np.ndarray      # magnitude per component (FD steps, residual scaling)


def inflow_temperature(cfg: CaseConfig, x1):
    return cfg.T_base + (cfg.T_peak - cfg.T_base) * np.exp(-cfg.T_sharpness * (x1 - cfg.T_center) ** 2)


def inflow_velocity(cfg: CaseConfig, x2):
    return cfg.inflow_peak * 4.0 * x2 * (cfg.height - x2) / cfg.height ** 2


def build_ozone_case(cfg: CaseConfig) -> OzoneCase:
    """Channel ``]0,L[ x ]0,H[`` with parabolic inflow and the Gaussian wall temperature."""
    cfg.check_files()
    mech = load_mechanism(cfg.resolve(cfg.mechanism))
    for name in cfg.inflow_fractions:
        mech.index(name)
    if cfg.node_file:
        mesh = read_triangle_files(cfg.resolve(cfg.node_file), cfg.resolve(cfg.ele_file))
    else:
        mesh = rectangle_mesh(cfg.nx, cfg.ny, cfg.length, cfg.height, pattern=cfg.pattern)
    ns = mech.n_species
    if len(cfg.diffusivity) != ns - 1:
        raise ConfigError(f"need {ns - 1} diffusivities for {ns} species")
    w_in = np.zeros(ns)
    for name, val in cfg.inflow_fractions.items():
        w_in[mech.index(name)] = val
    if abs(w_in.sum() - 1.0) > 1e-8 or (w_in < 0).any():
        raise ConfigError("inflow mass fractions must be non-negative and sum to 1")

    x1, x2 = mesh.nodes.T
    tol = 1e-9 * max(cfg.length, cfg.height)
    inflow = np.flatnonzero(x1 < tol)
    wall = np.flatnonzero(((x2 < tol) | (x2 > cfg.height - tol)) & (x1 >= tol))
    T0 = inflow_temperature(cfg, x1)
    v_in = inflow_velocity(cfg, x2)

    bcs = BoundaryConditions()
    bcs.add(V1, inflow, v_in[inflow])
    bcs.add(V2, inflow, 0.0)
    bcs.add(V1, wall, 0.0)
    bcs.add(V2, wall, 0.0)
    walls_and_inflow = np.concatenate([inflow, wall])
    bcs.add(TEMP, walls_and_inflow, T0[walls_and_inflow])
    for i in range(ns - 1):
        bcs.add(TEMP + 1 + i, inflow, w_in[i])

    n_c = n_components(ns)
    U = np.zeros((mesh.n_nodes, n_c))
    U[:, V1] = v_in
    U[:, TEMP] = T0
    U[:, TEMP + 1:] = w_in[:-1]
    transport = TransportConfig(cfg.mu, cfg.conductivity, tuple(cfg.diffusivity), cfg.V_ref, cfg.P_th)

    # reference density and heat capacity of the inflow mixture
    m_bar = 1.0 / (w_in / mech.molar_masses).sum()
    rho = cfg.P_th * m_bar / (GAS_CONSTANT * cfg.T_base)
    cp = float(w_in @ mech.specific_heats)
    capacity = np.array([0.0, rho, rho, rho * cp] + [rho] * (ns - 1))
    typical = np.array([1.0, cfg.V_ref, cfg.V_ref, max(cfg.T_peak - cfg.T_base, 1.0)]
                       + [max(w_in.max(), 0.1)] * (ns - 1))
    return OzoneCase(mesh, SolutionState(U, ns), mech, transport, bcs, capacity, typical)


# ---------------------------------------------------------------------------
# coupled run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    state: SolutionState
    mapping: MeshMapping
    converged: bool
    stage1_steps: int
    stage2_steps: int
    qoi: float
    summary: dict
    csv_path: Path | None = None
    stage1_state: SolutionState | None = None


def residual_scale(problem: LowMachProblem, case: OzoneCase, cfg: CaseConfig):
    """Per-unknown scale turning ``F`` into a dimensionless rate.

    Differential rows are divided by lumped mass, capacity and
    ``typical / t_ref`` with ``t_ref = L / V_ref``; continuity rows by
    ``lumped mass V_ref / L``; Dirichlet rows by the typical magnitude.
    """
    n_c = problem.n_c
    t_ref = cfg.length / cfg.V_ref
    lm = problem.mesh.lumped_mass[:, None]
    cap = np.where(case.capacity > 0, case.capacity, 1.0)
    scale = lm * cap * case.typical / t_ref * np.ones((1, n_c))
    scale[:, P] = problem.mesh.lumped_mass * cfg.V_ref / cfg.length
    scale = scale.ravel()
    rows, _ = problem.bcs.rows(n_c)
    scale[rows] = np.tile(case.typical, problem.n_nodes)[rows]
    return scale


def monitor_source(state: SolutionState, mech: Mechanism, name):
    if name.upper() == "T":
        return state.temperature
    return state.mass_fractions[:, mech.index(name)]


def driving_vector(mesh: TriangleMesh, values, order):
    """``psi``: recovered gradient (order 1) or pure second derivatives (order 2)."""
    if order == 1:
        return recover_gradient(mesh, values).values
    fit = quadratic_fit_operators(mesh)
    return np.column_stack([fit.dxx @ values, fit.dyy @ values])


def psi_floor(values, length, order, rel=1e-8):
    """Smallest derivative magnitude treated as a real feature of ``values``."""
    return rel * float(np.abs(values).max(initial=0.0)) / length ** order


def front_width(mesh: TriangleMesh, values, fraction=0.5):
    """Smallest element extent along the local gradient direction inside the front.

    The front is the set of elements whose gradient norm is at least
    ``fraction`` of the largest one.
    """
    values = np.asarray(values, dtype=float)
    g = (mesh.basis_gradients * values[mesh.triangles][:, :, None]).sum(axis=1)
    gn = np.hypot(g[:, 0], g[:, 1])
    if gn.max(initial=0.0) == 0.0:
        return float("nan")
    front = gn >= fraction * gn.max()
    d = g[front] / gn[front, None]
    proj = np.einsum("ead,ed->ea", mesh.nodes[mesh.triangles[front]], d)
    return float((proj.max(axis=1) - proj.min(axis=1)).min())


def refined_band_width(mesh: TriangleMesh, reference_area, height, ratio=0.5):
    """Total area of elements smaller than ``ratio * reference_area``, per unit height."""
    small = mesh.areas < ratio * reference_area
    return float(mesh.areas[small].sum() / height)


class _CoupledStepper:
    """Per-step callback of Stage 2: monitor, mesh substeps and ALE correction."""

    def __init__(self, cfg, case, problem, mapping, scale, out_dir):
        self.cfg = cfg
        self.case = case
        self.problem = problem
        self.mapping = mapping
        self.scale = scale
        self.out_dir = out_dir
        comp = mapping.computational
        self.smoother = smoothing_operator(comp)
        self.mesh_dt = cfg.mesh_dt_factor * mapping.ops.h_min ** 2 * cfg.tau
        self.mesh_h = self.mesh_dt
        self.mesh_h_max = cfg.mesh_dt_growth_cap * self.mesh_dt
        self.limit = cfg.mesh_tol * comp.diameter
        self.last_disp = np.inf if cfg.move_mesh else 0.0
        self.density = (1.0, 1.0)
        self.n = 0
        mask = np.ones(problem.n_c)
        mask[P] = 0.0
        self.ale_mask = mask

    def monitor(self, state):
        mesh = self.mapping.physical
        values = monitor_source(state, self.case.mech, self.cfg.monitor_field)
        psi = driving_vector(mesh, values, self.cfg.monitor_order)
        mon = build_monitor(psi, self.cfg.alpha, psi_floor=psi_floor(values, mesh.diameter,
                                                                     self.cfg.monitor_order))
        mon = smooth_monitor(mon, self.mapping.computational, self.cfg.smoothing_cycles,
                             operator=self.smoother)
        dens = monitor_density(mon)
        self.density = (float(dens.min()), float(dens.max()))
        return mon

    def __call__(self, u, rec):
        self.n += 1
        n_c = self.problem.n_c
        state = SolutionState.from_vector(u, self.case.state.n_species)
        state.clip_fractions()
        if self.cfg.move_mesh and self.cfg.mesh_substeps:
            mon = self.monitor(state)
            old = self.mapping
            mapping = old
            speed = 0.0
            halved = False
            for _ in range(self.cfg.mesh_substeps):
                step = step_mesh(mapping, mon.G, self.mesh_h, self.cfg.mesh_scheme)
                mapping = step.mapping
                halved |= step.halvings > 0
                speed = max(speed, float(np.hypot(*step.velocity.T).max(initial=0.0)))
            # stationarity is judged at the nominal step so a grown step cannot hide motion
            disp = speed * self.mesh_dt
            if halved:
                self.mesh_h = max(step.dt, self.mesh_dt)
            elif disp < self.last_disp:
                self.mesh_h = min(2.0 * self.mesh_h, self.mesh_h_max)
            self.last_disp = disp
            dx = mapping.x - old.x
            # values ride with the nodes; ALE correction for the realized velocity dx / dt
            corr = ale_convective_term(old, dx, state.values)
            state = SolutionState(state.values + corr * self.ale_mask, state.n_species)
            state.clip_fractions()
            self.mapping = mapping
            self.problem.set_mesh(mapping.physical)
            self.scale[:] = residual_scale(self.problem, self.case, self.cfg)
        if self.cfg.vtk_every and self.n % self.cfg.vtk_every == 0:
            export_vtk(self.out_dir / f"{self.cfg.name}_{self.n:05d}.vtk", self.mapping, state,
                       self.case.mech)
        logger.info("stage 2 step %d: t=%.4e dt=%.3e residual=%.3e mesh disp=%.3e",
                    self.n, rec.t, rec.dt, rec.residual, self.last_disp)
        return state.vector

    def steady(self, res):
        return res < self.cfg.steady_tol and self.last_disp < self.limit


def export_vtk(path, mapping: MeshMapping, state: SolutionState, mech: Mechanism, extra=None):
    mesh = mapping.physical
    if (mesh.areas <= 0).any():
        raise MeshStallError(f"refusing to write tangled mesh to {path}")
    fields_ = {"pressure": state.pressure, "velocity": state.velocity,
               "temperature": state.temperature, "density": state.density(mech)}
    w = state.mass_fractions
    for i, name in enumerate(mech.names):
        fields_[f"w_{name}"] = w[:, i]
    fields_.update(extra or {})
    write_vtk(mesh, fields_, path)


def _march_config(cfg: CaseConfig, problem, scale, max_steps):
    atol = np.full(problem.n_nodes * problem.n_c, cfg.atol)
    atol[P::problem.n_c] = np.inf   # pressure is a multiplier; left out of the error norm
    return MarchConfig(rtol=cfg.rtol, atol=atol, dt0=cfg.dt0, dt_min=cfg.dt_min, dt_max=cfg.dt_max,
                       steady_tol=cfg.steady_tol, max_steps=max_steps, residual_scale=scale)


def _clip(n_species):
    def on_step(u, rec):
        s = SolutionState.from_vector(u, n_species)
        s.clip_fractions()
        logger.info("stage 1 step %d: t=%.4e dt=%.3e residual=%.3e", rec.step, rec.t, rec.dt,
                    rec.residual)
        return s.vector
    return on_step


def run_coupled(cfg: CaseConfig, case: OzoneCase | None = None, write_outputs=True,
                stage1_state: SolutionState | None = None) -> RunResult:
    """Stage 1 (chemistry off, fixed mesh) then Stage 2 (chemistry and moving mesh).

    ``stage1_state`` skips Stage 1 and starts Stage 2 from the given state
    (used to compare monitors on one flow field).
    """
    case = case or build_ozone_case(cfg)
    out_dir = Path(cfg.output_dir)   # relative to the working directory
    if write_outputs:
        out_dir.mkdir(parents=True, exist_ok=True)
    ns = case.mech.n_species
    mapping = MeshMapping.identity(case.mesh, cfg.tau)
    t0 = time.perf_counter()

    u = case.state.vector
    n1 = 0
    if stage1_state is None:
        cold = LowMachProblem(case.mesh, case.mech.with_rates_scaled(0.0), case.transport, case.bcs,
                              cfg.stabilize)
        scale = residual_scale(cold, case, cfg)
        M = cold.mass_diagonal(case.capacity)
        u = project_initial(cold.residual, cold.jacobian(u, case.typical), M, u, 1e-2 * cfg.dt0)
        u, h1 = march_to_steady(cold.residual, lambda v: cold.jacobian(v, case.typical), M, u,
                                _march_config(cfg, cold, scale, cfg.stage1_max_steps),
                                on_step=_clip(ns))
        n1 = len(h1.accepted)
        if not h1.converged:
            raise StepFailure(f"stage 1 did not reach steady state in {n1} steps")
        logger.info("stage 1 converged after %d steps (%.1f s)", n1, time.perf_counter() - t0)
    else:
        u = stage1_state.vector
    cold_state = SolutionState.from_vector(u.copy(), ns)

    mech = case.mech if cfg.chemistry else case.mech.with_rates_scaled(0.0)
    hot = LowMachProblem(case.mesh, mech, case.transport, case.bcs, cfg.stabilize)
    scale = residual_scale(hot, case, cfg)
    stepper = _CoupledStepper(cfg, case, hot, mapping, scale, out_dir)
    M_of = lambda: hot.mass_diagonal(case.capacity)

    def F(v):
        return hot.residual(v)

    def J(v):
        return hot.jacobian(v, case.typical)

    u, h2 = _march_moving(F, J, M_of, u, _march_config(cfg, hot, scale, cfg.stage2_max_steps),
                          stepper)
    n2 = len(h2.accepted)
    state = SolutionState.from_vector(u, ns)
    mesh = stepper.mapping.physical
    qoi_name = "O3" if "O3" in case.mech.names else case.mech.names[-1]
    qoi = evaluate_qoi_mean(mesh, monitor_source(state, case.mech, qoi_name))
    uniform_area = case.mesh.areas.mean()
    src = monitor_source(state, case.mech, cfg.monitor_field)
    summary = {
        "case": cfg.name,
        "monitor_order": cfg.monitor_order,
        "converged": int(h2.converged),
        "stage1_steps": n1,
        "stage2_steps": n2,
        "n_nodes": mesh.n_nodes,
        "qoi": qoi,
        "qoi_reference": REFERENCE_QOI,
        "min_area": float(mesh.areas.min()),
        "max_area": float(mesh.areas.max()),
        "monitor_density_min": stepper.density[0],
        "monitor_density_max": stepper.density[1],
        "front_width": front_width(mesh, src),
        "uniform_front_width": front_width(case.mesh, _transfer(mesh, case.mesh, src)),
        "refined_band_width": refined_band_width(mesh, uniform_area, cfg.height),
        "final_residual": float(h2.residuals[-1]) if n2 else float("nan"),
    }
    logger.info("coupled run finished in %.1f s: %s", time.perf_counter() - t0, summary)
    csv_path = None
    if write_outputs:
        csv_path = out_dir / f"{cfg.name}_summary.csv"
        write_summary_csv(csv_path, summary)
        export_vtk(out_dir / f"{cfg.name}_final.vtk", stepper.mapping, state, case.mech)
    return RunResult(state, stepper.mapping, bool(h2.converged), n1, n2, qoi, summary, csv_path,
                     cold_state)


def _march_moving(F, J, M_of, u, mcfg, stepper: _CoupledStepper):
    """``march_to_steady`` whose mass matrix is refreshed after every mesh move."""
    mass = M_of()

    def on_step(v, rec):
        out = stepper(v, rec)
        mass[:] = M_of()
        return out

    return march_to_steady(F, J, mass, u, mcfg, on_step=on_step, is_steady=stepper.steady)


def _transfer(src_mesh: TriangleMesh, dst_mesh: TriangleMesh, values):
    """Linear interpolation of nodal values between two meshes of the same domain."""
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator
    lin = LinearNDInterpolator(src_mesh.nodes, values)(dst_mesh.nodes)
    miss = ~np.isfinite(lin)
    if miss.any():
        lin[miss] = NearestNDInterpolator(src_mesh.nodes, values)(dst_mesh.nodes[miss])
    return lin


def write_summary_csv(path, summary: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in summary.items():
            w.writerow([k, repr(v) if isinstance(v, float) else v])


# ---------------------------------------------------------------------------
# monitor demo and 1D equidistribution
# ---------------------------------------------------------------------------

ANALYTIC_FIELDS = {
    # name -> callable(x, y, width, center)
    "front": lambda x, y, w, c: np.tanh((x - c[0]) / w),
    "gaussian": lambda x, y, w, c: np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2) / w ** 2),
    "ring": lambda x, y, w, c: np.tanh((np.hypot(x - c[0], y - c[1]) - 0.25) / w),
}


def _read_ini(path, section):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if section not in parser:
        raise ConfigError(f"{path}: missing section [{section}]")
    return parser[section], path.parent


def monitor_demo(path):
    """Build, smooth and export the monitor of an analytic field; returns the output path."""
    sec, _ = _read_ini(path, "monitor_demo")
    name = sec.get("field", "front")
    if name not in ANALYTIC_FIELDS:
        raise ConfigError(f"unknown field {name!r}; known: {sorted(ANALYTIC_FIELDS)}")
    n = sec.getint("n", 32)
    order = sec.getint("order", 1)
    if order not in (1, 2):
        raise ConfigError("order must be 1 or 2")
    alpha = sec.getfloat("alpha", 80.0)
    cycles = sec.getint("smoothing_cycles", 8)
    width = sec.getfloat("width", 0.05)
    center = (sec.getfloat("center_x", 0.5), sec.getfloat("center_y", 0.5))
    mesh = rectangle_mesh(n, n, pattern=sec.get("pattern", "alternating"))
    u = ANALYTIC_FIELDS[name](mesh.nodes[:, 0], mesh.nodes[:, 1], width, center)
    mon = smooth_monitor(build_monitor(driving_vector(mesh, u, order), alpha), mesh, cycles)
    out = Path(sec.get("output", "monitor_demo.vtk"))
    fields_ = {"u": u, "density": monitor_density(mon), "G_xx": mon.G[:, 0, 0],
               "G_xy": mon.G[:, 0, 1], "G_yy": mon.G[:, 1, 1]}
    if sec.getboolean("relax", False):
        mapping = MeshMapping.identity(mesh)
        f = ANALYTIC_FIELDS[name]

        def monitor_of(x):
            moved = mesh.with_nodes(x)
            psi = driving_vector(moved, f(x[:, 0], x[:, 1], width, center), order)
            return smooth_monitor(build_monitor(psi, alpha), mesh, cycles).G

        res = relax_mesh(mapping, monitor_of, scheme="implicit", dt=sec.getfloat("dt", 0.05),
                         max_steps=sec.getint("max_steps", 200), tol=sec.getfloat("tol", 1e-6))
        mesh = res.mapping.physical
        fields_["u"] = f(mesh.nodes[:, 0], mesh.nodes[:, 1], width, center)
    write_vtk(mesh, fields_, out)
    return out


def equidistribute_1d(path):
    """Relax a strip mesh under ``G = diag(M(x1), 1)`` and compare with the 1D oracle.

    Writes a CSV with node abscissas of the bottom row, the oracle abscissas
    and their difference; returns ``(csv_path, max_error)`` with the error
    taken over all nodes relative to the strip length.
    """
    sec, _ = _read_ini(path, "equidistribute")
    nx, ny = sec.getint("nx", 64), sec.getint("ny", 8)
    length, height = sec.getfloat("length", 1.0), sec.getfloat("height", 0.125)
    amp, sharp, center = sec.getfloat("amplitude", 50.0), sec.getfloat("sharpness", 500.0), \
        sec.getfloat("center", 0.5)
    density = lambda x: 1.0 + amp * np.exp(-sharp * (x - center) ** 2)
    mesh = rectangle_mesh(nx, ny, length, height, pattern=sec.get("pattern", "right"))
    mapping = MeshMapping.identity(mesh)
    h = mapping.ops.h_min
    res = relax_mesh(mapping, stratified_monitor(density), scheme="implicit",
                     dt=sec.getfloat("dt_factor", 200.0) * h * h, max_steps=sec.getint("max_steps", 2000),
                     tol=sec.getfloat("tol", 1e-10), slide=True)
    if not res.converged:
        raise MeshStallError(f"mesh did not reach equilibrium in {res.steps} steps")
    x = res.mapping.x[:, 0]
    oracle_nodes = equidistribution_oracle(density, nx, 0.0, length)
    col = np.rint(mesh.nodes[:, 0] / length * nx).astype(int)
    err = np.abs(x - oracle_nodes[col]).max() / length
    out = Path(sec.get("output", "equidistribute_1d.csv"))
    bottom = np.flatnonzero(mesh.nodes[:, 1] == mesh.nodes[:, 1].min())
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "x_mesh", "x_oracle", "error"])
        for k in bottom[np.argsort(col[bottom])]:
            w.writerow([col[k], repr(float(x[k])), repr(float(oracle_nodes[col[k]])),
                        repr(float(x[k] - oracle_nodes[col[k]]))])
        w.writerow(["max_error", "", "", repr(float(err))])
    return out, float(err)


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

def _setup_logging():
    level = os.environ.get("MOVEMESH_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG,
              "warning": logging.WARNING}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _parser():
    p = argparse.ArgumentParser(prog="movemesh",
                                description="Anisotropic moving-mesh solver for low-Mach reacting flow.")
    p.add_argument("--version", action="version", version=f"movemesh {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="cap the BLAS/OpenMP thread pools (1 gives bitwise-reproducible runs)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the coupled physics/mesh case of an INI config")
    r.add_argument("config")
    r.add_argument("--monitor-order", type=int, choices=(1, 2), default=None)
    r.add_argument("--output-dir", default=None)
    c = sub.add_parser("check-mesh", help="print a quality report for Triangle .node/.ele files")
    c.add_argument("node")
    c.add_argument("ele")
    m = sub.add_parser("monitor-demo", help="build, smooth and export a monitor of an analytic field")
    m.add_argument("config")
    e = sub.add_parser("equidistribute-1d", help="run the 1D-stratified equidistribution check")
    e.add_argument("config")
    return p


def _dispatch(args):
    if args.command == "check-mesh":
        mesh = read_triangle_files(args.node, args.ele)
        q = mesh_quality(mesh)
        print(f"nodes {mesh.n_nodes}  triangles {mesh.n_elements}  boundary nodes {mesh.boundary_nodes.size}")
        for f in fields(q):
            print(f"{f.name:>16s}  {getattr(q, f.name)}")
        return EXIT_OK
    if args.command == "monitor-demo":
        print(f"wrote {monitor_demo(args.config)}")
        return EXIT_OK
    if args.command == "equidistribute-1d":
        out, err = equidistribute_1d(args.config)
        print(f"max abscissa error {err:.4e} (relative to length); wrote {out}")
        return EXIT_OK
    cfg = load_config(args.config)
    if args.monitor_order is not None:
        cfg = replace(cfg, monitor_order=args.monitor_order)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=str(Path(args.output_dir).resolve()))
    res = run_coupled(cfg)
    print(f"J = {res.qoi:.8f}  (reference {REFERENCE_QOI}, converged={res.converged})")
    print(f"wrote {res.csv_path}")
    return EXIT_OK if res.converged else EXIT_NUMERICAL


def cli_main(argv=None) -> int:
    _setup_logging()
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=args.threads):
                return _dispatch(args)
        return _dispatch(args)
    except (FileNotFoundError, ConfigError, MechanismError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StepFailure, MeshStallError, MonitorError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(cli_main())
