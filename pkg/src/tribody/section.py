"""Initial conditions on the size-minimum section {r = r0, v = 0}."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    SINGULAR_RATIO,
    ConservedPair,
    MassSystem,
    McGeheeState,
    SingularStateError,
    mass_inner,
    mass_norm,
    pair_distances,
    rotate_J,
    shape_potential_V,
)


class InfeasibleSectionError(ValueError):
    """The energy left for the residual velocity would be negative."""

    def __init__(self, margin: float):
        super().__init__(f"section infeasible: |w|^2 = 2V + 2 r0 h - omega^2/r0 = {margin:.6g} < 0")
        self.margin = margin


@dataclass(frozen=True)
class SectionSpec:
    r0: float
    shape: np.ndarray
    theta: float
    cons: ConservedPair

    def theorem_admissible(self) -> bool:
        """r0^2 < omega^2/(2|h|) with h < 0 and omega != 0."""
        h, om = self.cons.h, self.cons.omega
        return h < 0 and om != 0 and self.r0**2 < om**2 / (2 * abs(h))


def residual_energy(r0: float, shape, cons: ConservedPair, mass: MassSystem) -> float:
    """Squared mass norm available for the velocity component normal to {s, Js}."""
    s = normalize_shape(shape, mass)
    return 2.0 * float(shape_potential_V(s, mass)) + 2.0 * r0 * cons.h - cons.omega**2 / r0


def normalize_shape(shape, mass: MassSystem) -> np.ndarray:
    s = np.array(shape, dtype=float).reshape(4)
    n = float(mass_norm(s, mass))
    if not n > 0:
        raise SingularStateError("zero shape vector")
    return s / n


def complement_basis(s: np.ndarray, mass: MassSystem) -> np.ndarray:
    """Mass-orthonormal basis (2, 4) of the complement of span{s, Js}.

    Coordinate seeds e1..e4 are tried in order; a seed whose residual after
    projection is shorter than 0.3 is skipped.  If fewer than two survive, the
    seeds are retried in order of decreasing residual.
    """
    Js = rotate_J(s)
    seeds = np.eye(4) / np.sqrt(mass.diag)[:, None]

    def residual(e, basis):
        u = e - mass_inner(e, s, mass) * s - mass_inner(e, Js, mass) * Js
        for q in basis:
            u = u - mass_inner(u, q, mass) * q
        return u

    basis = []
    for e in seeds:
        u = residual(e, basis)
        n = float(mass_norm(u, mass))
        if n > 0.3:
            basis.append(u / n)
        if len(basis) == 2:
            return np.array(basis)
    order = np.argsort([-float(mass_norm(residual(e, []), mass)) for e in seeds], kind="stable")
    basis = []
    for k in order:
        u = residual(seeds[k], basis)
        n = float(mass_norm(u, mass))
        if n > 1e-8:
            basis.append(u / n)
        if len(basis) == 2:
            break
    return np.array(basis)


def build_section_state(spec: SectionSpec, mass: MassSystem) -> McGeheeState:
    """McGehee state with r = r0, v = 0 and the prescribed (h, omega).

    The rescaled velocity is ``z = b Js + w`` with ``b = omega/sqrt(r0)`` and
    ``w`` in the complement of span{s, Js} at angle ``theta``, sized so that the
    blown-up energy relation holds exactly.
    """
    if not spec.r0 > 0:
        raise ValueError("r0 must be positive")
    s = normalize_shape(spec.shape, mass)
    if min(pair_distances(s, mass)) < SINGULAR_RATIO:
        raise SingularStateError("collision shape")
    w2 = residual_energy(spec.r0, s, spec.cons, mass)
    if w2 < 0:
        raise InfeasibleSectionError(w2)
    e1, e2 = complement_basis(s, mass)
    w = math.sqrt(w2) * (math.cos(spec.theta) * e1 + math.sin(spec.theta) * e2)
    z = spec.cons.omega / math.sqrt(spec.r0) * rotate_J(s) + w
    return McGeheeState(spec.r0, s, z, tau=0.0, t=0.0)


def reverse_velocity(state: McGeheeState) -> McGeheeState:
    """Time-reversed copy of a state (z -> -z); the reversed orbit runs backward in time."""
    return McGeheeState(state.r, state.s.copy(), -state.z, tau=state.tau, t=state.t)


def tight_binary_shape(eps: float, phi1: float, phi2: float, mass: MassSystem) -> np.ndarray:
    """Unit shape with binary separation r12/r = eps."""
    rest = math.sqrt((1.0 - mass.mu1 * eps * eps) / mass.mu2)
    return np.array([eps * math.cos(phi1), eps * math.sin(phi1), rest * math.cos(phi2), rest * math.sin(phi2)])


def sample_shapes(n: int, mass: MassSystem, min_separation: float = 1e-4, seed: int = 0,
                  family: str = "tight_binary", eps_range=(1e-3, 0.1)) -> list[np.ndarray]:
    """Deterministic list of ``n`` unit shapes.

    ``tight_binary`` draws r12/r log-uniformly in ``eps_range`` with random
    orientations of both Jacobi vectors; ``uniform`` draws from the whole shape
    sphere.  Shapes with a pairwise distance below ``min_separation`` are
    redrawn.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = eps_range
    if not 0 < lo <= hi < 1 / math.sqrt(mass.mu1):
        raise ValueError("eps_range must satisfy 0 < lo <= hi < 1/sqrt(mu1)")
    rng = np.random.default_rng(seed)
    shapes = []
    attempts = 0
    while len(shapes) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise RuntimeError("could not satisfy min_separation; lower it")
        if family == "tight_binary":
            eps = math.exp(rng.uniform(math.log(lo), math.log(hi)))
            phi1, phi2 = rng.uniform(0.0, 2 * math.pi, size=2)
            s = tight_binary_shape(eps, phi1, phi2, mass)
        elif family == "uniform":
            s = rng.standard_normal(4) / np.sqrt(mass.diag)
        else:
            raise ValueError(f"unknown shape family {family!r}")
        s = s / float(mass_norm(s, mass))
        if min(pair_distances(s, mass)) >= min_separation:
            shapes.append(s)
    return shapes


def theorem_r0(K: float, cons: ConservedPair, safety: float = 0.5) -> tuple[float, float]:
    """Section size r0 and near-phase target r1 for a potential bound K.

    r0 = safety * min(1/K^2, sqrt(omega^2/(2|h|))) and r1 = omega^2/(2 sqrt(r0)).
    """
    if not K > 0:
        raise ValueError("K must be positive")
    if not cons.h < 0 or cons.omega == 0:
        raise ValueError("need negative energy and nonzero angular momentum")
    if not 0 < safety < 1:
        raise ValueError("safety factor must lie in (0, 1)")
    om2, ah = cons.omega**2, abs(cons.h)
    r0 = safety * min(1.0 / K**2, math.sqrt(om2 / (2 * ah)))
    r1 = om2 / (2 * math.sqrt(r0))
    if not r1 < om2 / (2 * ah * r0):
        raise ValueError(f"r1 = {r1:.6g} is not below omega^2/(2|h|r0) = {om2 / (2 * ah * r0):.6g}")
    return r0, r1
