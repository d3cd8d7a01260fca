import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import masses, nonsingular, pairwise_potential, random_states, vec4
from tribody.dynamics import (
    ConservedPair,
    JacobiState,
    McGeheeState,
    SingularStateError,
    absolute_from_jacobi,
    angular_momentum,
    blowdown,
    blowup,
    conserved,
    conserved_mcgehee,
    derive_mass_constants,
    energy_residual,
    f_function,
    f_initial,
    grad_U,
    grad_V,
    jacobi_from_absolute,
    kepler_G,
    lagrange_equilateral,
    mass_inner,
    pair_distances,
    potential_U,
    radial_velocity_v,
    rhs_jacobi,
    rhs_mcgehee,
    shape_potential_V,
)


def test_equal_mass_constants(equal):
    # mu1 = 1/2, mu2 = 2*1/3, nu = 1/2, alpha = 3
    assert (equal.mu1, equal.nu1, equal.nu2, equal.alpha) == (0.5, 0.5, 0.5, 3.0)
    assert equal.mu2 == pytest.approx(2 / 3, rel=1e-15)
    assert equal.kepler_coefficient == 8.0


def test_unequal_mass_constants():
    m = derive_mass_constants(1.0, 2.0, 3.0)
    assert m.mu1 == pytest.approx(2 / 3)
    assert m.mu2 == pytest.approx(9 / 6)
    assert (m.nu1, m.nu2) == pytest.approx((1 / 3, 2 / 3))
    assert m.alpha == pytest.approx(11.0)


@pytest.mark.parametrize("bad", [(0, 1, 1), (1, -1, 1), (1, 1, math.inf), (1, math.nan, 1)])
def test_invalid_masses(bad):
    with pytest.raises(ValueError):
        derive_mass_constants(*bad)


@settings(max_examples=200, deadline=None)
@given(masses, vec4, vec4)
def test_jacobi_absolute_round_trip(mass, x, v):
    st_ = JacobiState(x, v)
    q, qd = absolute_from_jacobi(st_, mass)
    w = np.array(mass.masses)
    assert np.allclose(w @ q, 0, atol=1e-12) and np.allclose(w @ qd, 0, atol=1e-12)
    back = jacobi_from_absolute(q, qd, mass)
    assert np.allclose(back.x, x, rtol=1e-12, atol=1e-12)
    assert np.allclose(back.xdot, v, rtol=1e-12, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(masses, vec4, vec4)
def test_blowup_round_trip(mass, x, v):
    assume(np.linalg.norm(x) > 1e-3)
    st_ = JacobiState(x, v, 1.5)
    b = blowup(st_, mass)
    assert float(mass_inner(b.s, b.s, mass)) == pytest.approx(1.0, abs=1e-15)
    d = blowdown(b)
    assert np.allclose(d.x, x, rtol=1e-12, atol=1e-14) and np.allclose(d.xdot, v, rtol=1e-12, atol=1e-14)
    assert d.t == 1.5


def test_unit_size_blowup_is_identity(equal):
    x = np.array([0.3, 0.1, 0.2, -0.4])
    x /= math.sqrt(float(mass_inner(x, x, equal)))
    v = np.array([1.0, -2.0, 0.5, 0.25])
    b = blowup(JacobiState(x, v), equal)
    assert b.r == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(b.s, x, atol=1e-15) and np.allclose(b.z, v, atol=1e-15)


def test_blowup_of_collision_rejected(equal):
    with pytest.raises(SingularStateError):
        blowup(JacobiState(np.zeros(4), np.ones(4)), equal)


def test_equilateral_unit_size_potential(equal):
    # side 1 gives I = sum m_i m_j r_ij^2 / M = 1, so r = 1 and V = U = 3
    q = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    st_ = jacobi_from_absolute(q, np.zeros((3, 2)), equal)
    assert conserved(st_, equal).r == pytest.approx(1.0, rel=1e-14)
    assert float(shape_potential_V(st_.x, equal)) == pytest.approx(3.0, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(masses, vec4)
def test_potential_matches_pairwise_sum(mass, x):
    assume(nonsingular(x, mass))
    q, _ = absolute_from_jacobi(JacobiState(x, np.zeros(4)), mass)
    assert float(potential_U(x, mass)) == pytest.approx(pairwise_potential(q, mass.masses), rel=1e-12)
    assert sorted(pair_distances(x, mass)) == pytest.approx(
        sorted(np.linalg.norm(q[i] - q[j]) for i, j in ((0, 1), (0, 2), (1, 2))), rel=1e-12)


def central_difference(f, x, h=1e-6):
    g = np.zeros(4)
    for k in range(4):
        e = np.zeros(4)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@settings(max_examples=100, deadline=None)
@given(masses, vec4)
def test_gradient_matches_finite_differences(mass, x):
    assume(nonsingular(x, mass, 0.2))
    fd = central_difference(lambda y: float(potential_U(y, mass)), x)
    assert np.allclose(grad_U(x, mass), fd, rtol=1e-6, atol=1e-6 * np.abs(fd).max())
    fdv = central_difference(lambda y: float(shape_potential_V(y, mass)), x)
    assert np.allclose(grad_V(x, mass), fdv, rtol=1e-6, atol=1e-6 * np.abs(fdv).max())


@settings(max_examples=100, deadline=None)
@given(masses, vec4)
def test_euler_homogeneity(mass, x):
    assume(nonsingular(x, mass))
    s = x / math.sqrt(float(mass_inner(x, x, mass)))
    # degree -1 homogeneity: s . grad V(s) = -V(s)
    assert float(s @ grad_V(s, mass)) == pytest.approx(-float(shape_potential_V(s, mass)), rel=1e-10)


def test_equilateral_acceleration_is_radial(equal):
    q = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    st_ = jacobi_from_absolute(q, np.zeros((3, 2)), equal)
    acc = rhs_jacobi(st_, equal)[4:]
    c = float(acc @ st_.x) / float(st_.x @ st_.x)
    assert c < 0 and np.allclose(acc, c * st_.x, atol=1e-13)


@pytest.mark.parametrize("m", [(1, 1, 1), (1, 2, 3), (0.3, 5, 1)])
def test_lagrange_orbit_is_a_central_configuration(m):
    mass = derive_mass_constants(*m)
    st_, period = lagrange_equilateral(mass, side=1.7)
    q, qd = absolute_from_jacobi(st_, mass)
    d = [np.linalg.norm(q[i] - q[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert d == pytest.approx([1.7] * 3, rel=1e-12)
    rate = 2 * math.pi / period
    assert rate**2 == pytest.approx(sum(m) / 1.7**3, rel=1e-12)
    assert np.allclose(rhs_jacobi(st_, mass)[4:], -rate**2 * st_.x, rtol=1e-10, atol=1e-12)
    # omega = I * rate for rigid counterclockwise rotation
    assert conserved(st_, mass).omega == pytest.approx(conserved(st_, mass).I * rate, rel=1e-12)


def test_angular_momentum_is_counterclockwise_positive(equal):
    x = np.array([1.0, 0.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0, 0.0])
    assert float(angular_momentum(x, v, equal)) == pytest.approx(equal.mu1)


def test_singular_state_rejected(equal):
    with pytest.raises(SingularStateError):
        potential_U(np.array([0.0, 0.0, 1.0, 0.0]), equal)
    with pytest.raises(SingularStateError):
        rhs_jacobi(JacobiState([0.0, 0.0, 1.0, 0.0], np.ones(4)), equal)


@settings(max_examples=100, deadline=None)
@given(masses, vec4, vec4)
def test_mcgehee_rhs_is_tangent_to_shape_sphere(mass, x, v):
    assume(nonsingular(x, mass))
    b = blowup(JacobiState(x, v), mass)
    d = rhs_mcgehee(b, mass)
    assert float(mass_inner(b.s, d[1:5], mass)) == pytest.approx(0.0, abs=1e-12 * (1 + np.abs(d).max()))
    assert d[9] == pytest.approx(b.r**1.5, rel=1e-14)
    assert d[0] == pytest.approx(b.r * float(radial_velocity_v(b.s, b.z, mass)), rel=1e-13)


@settings(max_examples=100, deadline=None)
@given(masses, vec4, vec4)
def test_blown_up_vector_field_matches_chain_rule(mass, x, v):
    """r' = r^{3/2} dr/dt and z' = r^{3/2} d(sqrt(r) xdot)/dt."""
    assume(nonsingular(x, mass, 0.1))
    st_ = JacobiState(x, v)
    b = blowup(st_, mass)
    dj = rhs_jacobi(st_, mass)
    r = b.r
    rdot = float(mass_inner(x, v, mass)) / r
    zdot = 0.5 * rdot / math.sqrt(r) * v + math.sqrt(r) * dj[4:]
    sdot = v / r - rdot * x / r**2
    d = rhs_mcgehee(b, mass)
    scale = 1 + np.abs(d).max()
    assert d[0] == pytest.approx(r**1.5 * rdot, abs=1e-12 * scale)
    assert np.allclose(d[1:5], r**1.5 * sdot, atol=1e-12 * scale)
    assert np.allclose(d[5:9], r**1.5 * zdot, atol=1e-11 * scale)


def test_conserved_pair_agrees_in_both_coordinates(equal):
    rng = np.random.default_rng(1)
    for x, v in random_states(rng, equal, 50):
        st_ = JacobiState(x, v)
        a = conserved(st_, equal)
        b = conserved_mcgehee(blowup(st_, equal), equal)
        assert b.h == pytest.approx(a.h, rel=1e-12, abs=1e-12)
        assert b.omega == pytest.approx(a.omega, rel=1e-12, abs=1e-12)
        # energy relation holds exactly for the state's own energy
        bb = blowup(st_, equal)
        assert float(energy_residual(bb.r, bb.s, bb.z, a.pair, equal)) < 1e-13


def test_f_and_kepler_functions(equal):
    c = ConservedPair(-1.0, 0.5)
    assert f_function(0.25, 0.0, c) == pytest.approx(0.25 / 0.25 + 0.5)
    assert f_initial(1 / 18, c) == pytest.approx(0.25 * 18 + 2 / 18)
    assert float(kepler_G(8.0, 3.0, equal)) == pytest.approx(4.5 - 1.0)


def test_mcgehee_state_array_round_trip():
    s = McGeheeState(0.5, [1, 0, 0, 0], [0, 1, 0, 0], tau=2.0, t=3.0)
    back = McGeheeState.from_array(s.as_array(), tau=2.0)
    assert back.r == 0.5 and back.t == 3.0 and np.array_equal(back.z, s.z)
