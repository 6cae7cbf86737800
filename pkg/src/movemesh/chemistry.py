"""Reaction mechanisms, mass-action kinetics and mixture thermodynamics.

Mechanism file grammar (``#`` starts a comment, blank lines ignored)::

    file      := "[species]" species* "[reactions]" reaction*
    species   := NAME M h0 cp              (kg/mol, J/kg at 298 K, J/(kg K))
    reaction  := side "->" side A b Ea [efficiencies]
    side      := term ("+" term)*
    term      := [INT] NAME | "M"           ("M" marks a third body)
    efficiencies := "eff:" NAME "=" FLOAT ("," NAME "=" FLOAT)*

Rates follow ``k = A T^b exp(-Ea / (R T))`` with SI units (m, mol, s, J).
Reversible steps are written as two irreversible reactions.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

GAS_CONSTANT = 8.314462618
T_REF = 298.0
P_ATM = 101325.0
MASS_FRACTION_TOL = 1e-8


class MechanismError(ValueError):
    pass


@dataclass(frozen=True)
class Species:
    name: str
    molar_mass: float
    formation_enthalpy: float
    specific_heat: float

    def __post_init__(self):
        if not self.molar_mass > 0:
            raise MechanismError(f"species {self.name}: molar mass must be positive")
        if not self.specific_heat > 0:
            raise MechanismError(f"species {self.name}: specific heat must be positive")

    def enthalpy(self, T):
        return self.formation_enthalpy + self.specific_heat * (np.asarray(T, dtype=float) - T_REF)


@dataclass(frozen=True)
class Reaction:
    reactants: dict
    products: dict
    A: float
    b: float = 0.0
    Ea: float = 0.0
    third_body: bool = False
    efficiencies: dict = field(default_factory=dict)
    equation: str = ""

    def __post_init__(self):
        if not self.A > 0:
            raise MechanismError(f"reaction {self.equation or '?'}: A must be positive")
        for coeffs in (self.reactants, self.products):
            for name, nu in coeffs.items():
                if nu < 0 or int(nu) != nu:
                    raise MechanismError(f"reaction {self.equation}: bad coefficient {nu} for {name}")


def arrhenius_rate(rxn: Reaction, T):
    """``k = A T^b exp(-Ea / (R T))``."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("temperature must be positive")
    return rxn.A * T ** rxn.b * np.exp(-rxn.Ea / (GAS_CONSTANT * T))


@dataclass(frozen=True)
class Mechanism:
    species: tuple
    reactions: tuple
    R: float = GAS_CONSTANT

    def __post_init__(self):
        if len(self.species) < 2:
            raise MechanismError("a mechanism needs at least two species")
        names = [s.name for s in self.species]
        if len(set(names)) != len(names):
            raise MechanismError("duplicate species names")
        known = set(names)
        for r in self.reactions:
            for name in list(r.reactants) + list(r.products) + list(r.efficiencies):
                if name not in known:
                    raise MechanismError(f"reaction {r.equation}: unknown species {name!r}")

    @property
    def n_species(self):
        return len(self.species)

    @property
    def names(self):
        return [s.name for s in self.species]

    def index(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise MechanismError(f"unknown species {name!r}") from None

    @cached_property
    def molar_masses(self):
        return np.array([s.molar_mass for s in self.species])

    @cached_property
    def formation_enthalpies(self):
        return np.array([s.formation_enthalpy for s in self.species])

    @cached_property
    def specific_heats(self):
        return np.array([s.specific_heat for s in self.species])

    @cached_property
    def _tables(self):
        ns, nr = self.n_species, len(self.reactions)
        nu_r = np.zeros((nr, ns))
        nu_p = np.zeros((nr, ns))
        eff = np.ones((nr, ns))
        for j, r in enumerate(self.reactions):
            for name, nu in r.reactants.items():
                nu_r[j, self.index(name)] = nu
            for name, nu in r.products.items():
                nu_p[j, self.index(name)] = nu
            for name, e in r.efficiencies.items():
                eff[j, self.index(name)] = e
        A = np.array([r.A for r in self.reactions])
        b = np.array([r.b for r in self.reactions])
        Ea = np.array([r.Ea for r in self.reactions])
        tb = np.array([r.third_body for r in self.reactions], dtype=bool)
        return nu_r, nu_p, eff, A, b, Ea, tb

    def stoichiometry(self):
        """Net coefficients ``nu'' - nu'``, shape ``(n_reactions, n_species)``."""
        nu_r, nu_p = self._tables[:2]
        return nu_p - nu_r

    def rate_constants(self, T):
        """``(n_points, n_reactions)`` Arrhenius constants."""
        T = np.atleast_1d(np.asarray(T, dtype=float))
        if np.any(T <= 0):
            raise ValueError("temperature must be positive")
        _, _, _, A, b, Ea, _ = self._tables
        return A * T[:, None] ** b * np.exp(-Ea / (self.R * T[:, None]))

    def with_rates_scaled(self, factor):
        """Copy with every pre-exponential factor multiplied by ``factor`` (may be 0)."""
        return _ScaledMechanism(self.species, self.reactions, self.R, float(factor))


@dataclass(frozen=True)
class _ScaledMechanism(Mechanism):
    scale: float = 1.0

    def rate_constants(self, T):
        return self.scale * Mechanism.rate_constants(self, T)


def _check_fractions(w, n_species):
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != n_species:
        raise ValueError(f"expected {n_species} mass fractions, got {w.shape[-1]}")
    if np.any(w < -MASS_FRACTION_TOL):
        raise ValueError("negative mass fraction beyond tolerance")
    return w


def production_rates(mech: Mechanism, T, w, rho):
    """Molar production rates and mass sources.

    Inputs broadcast over points: ``T`` and ``rho`` of shape ``(n,)`` and
    ``w`` of shape ``(n, n_species)`` (or a single point).  Returns
    ``(wdot, f)`` with ``wdot`` in mol/(m^3 s) and ``f = M_i wdot_i`` in
    kg/(m^3 s).  Small negative fractions within tolerance are clipped.
    """
    single = np.ndim(w) == 1
    w = np.atleast_2d(_check_fractions(w, mech.n_species))
    T = np.broadcast_to(np.asarray(T, dtype=float), w.shape[:1])
    rho = np.broadcast_to(np.asarray(rho, dtype=float), w.shape[:1])
    nu_r, nu_p, eff, *_ , tb = mech._tables
    c = rho[:, None] * np.clip(w, 0.0, None) / mech.molar_masses
    k = mech.rate_constants(T)
    rate = k * np.prod(c[:, None, :] ** nu_r[None], axis=2)
    if tb.any():
        cm = c @ eff.T
        rate = np.where(tb, rate * cm, rate)
    wdot = rate @ (nu_p - nu_r)
    f = wdot * mech.molar_masses
    if single:
        return wdot[0], f[0]
    return wdot, f


def heat_release(mech: Mechanism, T, w, rho):
    """``f0 = -sum_i h_i(T) M_i wdot_i`` in W/m^3."""
    _, f = production_rates(mech, T, w, rho)
    T = np.asarray(T, dtype=float)
    h = mech.formation_enthalpies + mech.specific_heats * (T[..., None] - T_REF)
    return -(h * f).sum(axis=-1)


def mixture_molar_mass(species, w):
    """``(sum_i w_i / M_i)^-1``; ``species`` is a mechanism, species list or molar masses."""
    if isinstance(species, Mechanism):
        m = species.molar_masses
    else:
        m = np.array([s.molar_mass if isinstance(s, Species) else s for s in species], dtype=float)
    if np.any(m <= 0):
        raise ValueError("molar masses must be positive")
    return 1.0 / (np.asarray(w, dtype=float) / m).sum(axis=-1)


def mixture_specific_heat(mech: Mechanism, w):
    return np.asarray(w, dtype=float) @ mech.specific_heats


def density_eos(P_th, M_bar, T):
    """``rho = P_th M_bar / (R T)``."""
    T = np.asarray(T, dtype=float)
    if np.any(T <= 0):
        raise ValueError("temperature must be positive")
    return P_th * np.asarray(M_bar, dtype=float) / (GAS_CONSTANT * T)


def full_fractions(w_reduced):
    """Append the closure species ``w_ns = 1 - sum_{i<ns} w_i``."""
    w_reduced = np.asarray(w_reduced, dtype=float)
    return np.concatenate([w_reduced, 1.0 - w_reduced.sum(axis=-1, keepdims=True)], axis=-1)


# ---------------------------------------------------------------------------
# mechanism files
# ---------------------------------------------------------------------------

_TERM = re.compile(r"^(\d*)\s*([A-Za-z][A-Za-z0-9_()*-]*)$")


def _parse_side(text, lineno):
    coeffs = {}
    third = False
    for term in text.split("+"):
        term = term.strip()
        m = _TERM.match(term)
        if not m:
            raise MechanismError(f"line {lineno}: cannot parse term {term!r}")
        nu = int(m.group(1) or 1)
        name = m.group(2)
        if name == "M":
            third = True
            continue
        coeffs[name] = coeffs.get(name, 0) + nu
    return coeffs, third


def parse_mechanism(text: str) -> Mechanism:
    section = None
    species, reactions = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[] ").lower()
            if section not in ("species", "reactions"):
                raise MechanismError(f"line {lineno}: unknown section [{section}]")
            continue
        if section == "species":
            parts = line.split()
            if len(parts) != 4:
                raise MechanismError(f"line {lineno}: expected 'name M h0 cp'")
            try:
                species.append(Species(parts[0], *map(float, parts[1:])))
            except ValueError as exc:
                raise MechanismError(f"line {lineno}: {exc}") from None
        elif section == "reactions":
            if "->" not in line:
                raise MechanismError(f"line {lineno}: reaction needs '->'")
            lhs, rest = line.split("->", 1)
            eff = {}
            if "eff:" in rest:
                rest, eff_text = rest.split("eff:", 1)
                for item in eff_text.split(","):
                    name, val = item.split("=")
                    eff[name.strip()] = float(val)
            tokens = rest.split()
            if len(tokens) < 4:
                raise MechanismError(f"line {lineno}: expected products followed by 'A b Ea'")
            try:
                A, b, Ea = map(float, tokens[-3:])
            except ValueError:
                raise MechanismError(f"line {lineno}: bad Arrhenius parameters") from None
            rhs = " ".join(tokens[:-3])
            reac, tb1 = _parse_side(lhs, lineno)
            prod, tb2 = _parse_side(rhs, lineno)
            if tb1 != tb2:
                raise MechanismError(f"line {lineno}: third body must appear on both sides")
            equation = f"{lhs.strip()} -> {rhs.strip()}"
            try:
                reactions.append(Reaction(reac, prod, A, b, Ea, tb1, eff, equation))
            except MechanismError as exc:
                raise MechanismError(f"line {lineno}: {exc}") from None
        else:
            raise MechanismError(f"line {lineno}: data outside a section")
    mech = Mechanism(tuple(species), tuple(reactions))
    _check_balance(mech)
    return mech


def _check_balance(mech: Mechanism):
    """Every reaction must conserve mass: ``sum_i M_i (nu''_i - nu'_i) = 0``."""
    net = mech.stoichiometry() @ mech.molar_masses
    scale = mech.molar_masses.max()
    for r, d in zip(mech.reactions, net):
        if abs(d) > 1e-9 * scale:
            raise MechanismError(f"reaction {r.equation} does not conserve mass ({d:+.3e} kg/mol)")


def load_mechanism(path) -> Mechanism:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"mechanism file not found: {path}")
    return parse_mechanism(path.read_text())
