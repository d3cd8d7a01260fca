"""Planar three-body dynamics in Jacobi and McGehee blow-up coordinates.

Configuration vectors are 4-vectors ``x = (x1, x2)`` with ``x1 = q2 - q1`` (the
binary separation) and ``x2 = q3 - nu1*q1 - nu2*q2`` (third body relative to the
binary barycenter).  Every norm, projection and inner product on 4-vectors uses
the mass metric ``<<a, b>> = a^T M b`` with ``M = diag(mu1, mu1, mu2, mu2)``.

Angular momentum is counterclockwise-positive::

    omega = mu1 * x1 ^ x1dot + mu2 * x2 ^ x2dot = <<J x, xdot>>

where ``J`` rotates each planar block by +90 degrees.  Only ``omega**2`` enters
the collision-avoidance bounds, so the sign convention is cosmetic.

Most helpers are vectorized over leading axes: a ``(..., 4)`` array of
configurations gives a ``(...)`` array of results.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels

#: pairwise distance below ``SINGULAR_RATIO * r`` flags a state as singular
SINGULAR_RATIO = 1e-12


class SingularStateError(ValueError):
    """A pairwise distance vanished (to round-off) or the size r is zero."""


@dataclass(frozen=True)
class MassSystem:
    m1: float
    m2: float
    m3: float
    mu1: float = field(init=False)
    mu2: float = field(init=False)
    nu1: float = field(init=False)
    nu2: float = field(init=False)
    alpha: float = field(init=False)

    def __post_init__(self):
        for name in ("m1", "m2", "m3"):
            m = getattr(self, name)
            if not np.isfinite(m) or m <= 0:
                raise ValueError(f"mass {name} must be positive and finite, got {m!r}")
        m1, m2, m3 = float(self.m1), float(self.m2), float(self.m3)
        set_ = object.__setattr__
        set_(self, "mu1", m1 * m2 / (m1 + m2))
        set_(self, "mu2", (m1 + m2) * m3 / (m1 + m2 + m3))
        set_(self, "nu1", m1 / (m1 + m2))
        set_(self, "nu2", m2 / (m1 + m2))
        set_(self, "alpha", m1 * m2 + m1 * m3 + m2 * m3)

    @property
    def masses(self) -> tuple[float, float, float]:
        return (self.m1, self.m2, self.m3)

    @property
    def diag(self) -> np.ndarray:
        """Diagonal of the mass matrix M."""
        return np.array([self.mu1, self.mu1, self.mu2, self.mu2])

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diag)

    @property
    def kepler_coefficient(self) -> float:
        """Coefficient 4(m1+m2)m3 of the comparison Kepler problem for rho."""
        return 4.0 * (self.m1 + self.m2) * self.m3

    def params(self) -> np.ndarray:
        """Flat parameter vector consumed by the integration kernels."""
        return np.array([self.m1, self.m2, self.m3, self.mu1, self.mu2, self.nu1, self.nu2])


def derive_mass_constants(m1: float, m2: float, m3: float) -> MassSystem:
    return MassSystem(float(m1), float(m2), float(m3))


@dataclass(frozen=True)
class ConservedPair:
    h: float
    omega: float


@dataclass
class JacobiState:
    """Jacobi positions ``x = (x1, x2)`` and velocities ``xdot`` at physical time t."""

    x: np.ndarray
    xdot: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).reshape(4)
        self.xdot = np.array(self.xdot, dtype=float).reshape(4)
        self.t = float(self.t)

    @classmethod
    def from_parts(cls, x1, x2, v1, v2, t=0.0) -> JacobiState:
        return cls(np.concatenate([x1, x2]), np.concatenate([v1, v2]), t)

    @classmethod
    def from_array(cls, y, t=0.0) -> JacobiState:
        y = np.asarray(y, dtype=float)
        return cls(y[:4], y[4:8], t)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x, self.xdot])

    x1 = property(lambda self: self.x[:2])
    x2 = property(lambda self: self.x[2:])
    v1 = property(lambda self: self.xdot[:2])
    v2 = property(lambda self: self.xdot[2:])


@dataclass
class McGeheeState:
    """Blown-up state: size r, shape s (unit mass norm), rescaled velocity z.

    ``tau`` is the fictitious time with ``dt = r**1.5 dtau`` and ``t`` the
    physical time accumulated along the way.
    """

    r: float
    s: np.ndarray
    z: np.ndarray
    tau: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        self.r = float(self.r)
        self.s = np.array(self.s, dtype=float).reshape(4)
        self.z = np.array(self.z, dtype=float).reshape(4)

    @classmethod
    def from_array(cls, y, tau=0.0) -> McGeheeState:
        y = np.asarray(y, dtype=float)
        return cls(y[0], y[1:5], y[5:9], tau, y[9])

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.r], self.s, self.z, [self.t]])


# -- mass metric -------------------------------------------------------------

def rotate_J(a: np.ndarray) -> np.ndarray:
    """Apply the block rotation J = diag(R, R), R = [[0, -1], [1, 0]]."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    out[..., 0] = -a[..., 1]
    out[..., 1] = a[..., 0]
    out[..., 2] = -a[..., 3]
    out[..., 3] = a[..., 2]
    return out


def mass_inner(a, b, mass: MassSystem):
    return np.sum(mass.diag * np.asarray(a, dtype=float) * np.asarray(b, dtype=float), axis=-1)


def mass_norm(a, mass: MassSystem):
    return np.sqrt(mass_inner(a, a, mass))


# -- coordinates -------------------------------------------------------------

def jacobi_from_absolute(q, qdot, mass: MassSystem, t: float = 0.0) -> JacobiState:
    """Map absolute positions/velocities (3x2 arrays) to a Jacobi state."""
    q = np.asarray(q, dtype=float).reshape(3, 2)
    qdot = np.asarray(qdot, dtype=float).reshape(3, 2)

    def reduce(p):
        return np.concatenate([p[1] - p[0], p[2] - mass.nu1 * p[0] - mass.nu2 * p[1]])

    return JacobiState(reduce(q), reduce(qdot), t)


def absolute_from_jacobi(state: JacobiState, mass: MassSystem):
    """Inverse of :func:`jacobi_from_absolute` with the center of mass at rest at the origin.

    Returns ``(q, qdot)`` as 3x2 arrays.
    """
    mtot = mass.m1 + mass.m2 + mass.m3
    m12 = mass.m1 + mass.m2

    def expand(a):
        a1, a2 = a[:2], a[2:]
        c12 = -mass.m3 / mtot * a2  # binary barycenter
        return np.array([c12 - mass.nu2 * a1, c12 + mass.nu1 * a1, m12 / mtot * a2])

    return expand(state.x), expand(state.xdot)


def pair_distances(x, mass: MassSystem):
    """Return (r12, r13, r23) for configurations ``x`` of shape (..., 4)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., :2], x[..., 2:]
    r12 = np.hypot(x1[..., 0], x1[..., 1])
    d13 = x2 + mass.nu2 * x1
    d23 = x2 - mass.nu1 * x1
    return r12, np.hypot(d13[..., 0], d13[..., 1]), np.hypot(d23[..., 0], d23[..., 1])


def _check_nonsingular(x, mass: MassSystem):
    r = float(mass_norm(x, mass))
    dmin = min(pair_distances(x, mass))
    if not r > 0 or dmin < SINGULAR_RATIO * r:
        raise SingularStateError(f"singular configuration: min pair distance {dmin:.3e}, r = {r:.3e}")


def potential_U(x, mass: MassSystem):
    """Newtonian potential (positive convention) of configuration(s) ``x``."""
    if isinstance(x, JacobiState):
        x = x.x
    r12, r13, r23 = pair_distances(x, mass)
    if np.any(np.minimum(np.minimum(r12, r13), r23) == 0):
        raise SingularStateError("zero pairwise distance")
    return mass.m1 * mass.m2 / r12 + mass.m1 * mass.m3 / r13 + mass.m2 * mass.m3 / r23


def grad_U(x, mass: MassSystem):
    """Configuration-space gradient of U (plain, not mass-weighted), shape (..., 4)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., :2], x[..., 2:]
    d13 = x2 + mass.nu2 * x1
    d23 = x2 - mass.nu1 * x1
    r12, r13, r23 = pair_distances(x, mass)
    c12 = (mass.m1 * mass.m2 / r12**3)[..., None]
    c13 = (mass.m1 * mass.m3 / r13**3)[..., None]
    c23 = (mass.m2 * mass.m3 / r23**3)[..., None]
    g1 = -c12 * x1 - mass.nu2 * c13 * d13 + mass.nu1 * c23 * d23
    g2 = -c13 * d13 - c23 * d23
    return np.concatenate([g1, g2], axis=-1)


def shape_potential_V(s, mass: MassSystem):
    """U evaluated on the shape sphere; U(x) = V(x/r)/r by homogeneity."""
    return potential_U(s, mass)


def grad_V(s, mass: MassSystem):
    return grad_U(s, mass)


def kinetic_T(xdot, mass: MassSystem):
    return 0.5 * mass_inner(xdot, xdot, mass)


def angular_momentum(x, xdot, mass: MassSystem):
    return mass_inner(rotate_J(x), xdot, mass)


@dataclass(frozen=True)
class ConservedReport:
    h: float
    omega: float
    T: float
    U: float
    I: float
    r: float

    @property
    def pair(self) -> ConservedPair:
        return ConservedPair(self.h, self.omega)


def conserved(state: JacobiState, mass: MassSystem) -> ConservedReport:
    _check_nonsingular(state.x, mass)
    T = float(kinetic_T(state.xdot, mass))
    U = float(potential_U(state.x, mass))
    I = float(mass_inner(state.x, state.x, mass))
    return ConservedReport(
        h=T - U, omega=float(angular_momentum(state.x, state.xdot, mass)), T=T, U=U, I=I, r=np.sqrt(I)
    )


def conserved_mcgehee(state: McGeheeState, mass: MassSystem) -> ConservedPair:
    """(h, omega) read off the blown-up variables directly."""
    V = float(shape_potential_V(state.s, mass))
    h = (0.5 * float(mass_inner(state.z, state.z, mass)) - V) / state.r
    omega = float(angular_momentum(state.s, state.z, mass)) * np.sqrt(state.r)
    return ConservedPair(h, omega)


# -- blow-up -----------------------------------------------------------------

def blowup(state: JacobiState, mass: MassSystem) -> McGeheeState:
    r = float(mass_norm(state.x, mass))
    if not r > 0:
        raise SingularStateError("cannot blow up a state with r = 0")
    s = state.x / r
    s /= float(mass_norm(s, mass))
    return McGeheeState(r, s, np.sqrt(r) * state.xdot, tau=0.0, t=state.t)


def blowdown(state: McGeheeState, mass: MassSystem | None = None) -> JacobiState:
    return JacobiState(state.r * state.s, state.z / np.sqrt(state.r), state.t)


def radial_velocity_v(s, z, mass: MassSystem):
    """v = <<s, z>>; equals sqrt(r) * dr/dt."""
    return mass_inner(s, z, mass)


# -- right-hand sides ----------------------------------------------------------

def rhs_jacobi(state: JacobiState, mass: MassSystem) -> np.ndarray:
    """Time derivative (xdot, xddot) of a Jacobi state, as an 8-vector."""
    dy, singular = kernels.rhs(kernels.MODE_JACOBI, mass.params(), state.as_array())
    if singular:
        raise SingularStateError("singular state in rhs_jacobi")
    return dy


def rhs_mcgehee(state: McGeheeState, mass: MassSystem) -> np.ndarray:
    """tau-derivative (r', s', z', t') of a blown-up state as a 10-vector."""
    dy, singular = kernels.rhs(kernels.MODE_MCGEHEE, mass.params(), state.as_array())
    if singular:
        raise SingularStateError("collision shape in rhs_mcgehee")
    return dy


# -- Sundman-Birkhoff and Kepler comparison functions -------------------------

def f_function(r, v, cons: ConservedPair):
    """F = v^2 - 2 r h + omega^2 / r (non-decreasing while v >= 0)."""
    return v * v - 2.0 * r * cons.h + cons.omega**2 / r


def f_initial(r0, cons: ConservedPair):
    """F at a size minimum (v = 0)."""
    return cons.omega**2 / r0 + 2.0 * abs(cons.h) * r0


def kepler_G(rho, rhodot, mass: MassSystem):
    """Comparison Kepler energy 1/2 rhodot^2 - 4(m1+m2)m3/rho."""
    return 0.5 * rhodot * rhodot - mass.kepler_coefficient / rho


def energy_residual(r, s, z, cons: ConservedPair, mass: MassSystem):
    """Scaled residual of 1/2|z|^2 - V(s) = r h, normalised by max(1, V)."""
    V = shape_potential_V(s, mass)
    return np.abs(0.5 * mass_inner(z, z, mass) - V - r * cons.h) / np.maximum(1.0, V)


def lagrange_equilateral(mass: MassSystem, side: float = 1.0):
    """Rigidly rotating equilateral solution: (initial JacobiState, period).

    The bodies sit on an equilateral triangle of the given side about their
    barycenter and rotate counterclockwise at rate sqrt(M / side^3).
    """
    if not side > 0:
        raise ValueError("side must be positive")
    M = sum(mass.masses)
    corners = side / np.sqrt(3.0) * np.array(
        [[np.cos(a), np.sin(a)] for a in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3)])
    q = corners - np.average(corners, axis=0, weights=mass.masses)
    rate = np.sqrt(M / side**3)
    qdot = rate * np.column_stack([-q[:, 1], q[:, 0]])
    return jacobi_from_absolute(q, qdot, mass), 2 * np.pi / rate
