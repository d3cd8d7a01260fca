import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import masses, nonsingular, vec4
from tribody.dynamics import (
    ConservedPair,
    SingularStateError,
    conserved_mcgehee,
    derive_mass_constants,
    energy_residual,
    mass_inner,
    pair_distances,
    rotate_J,
    shape_potential_V,
)
from tribody.section import (
    InfeasibleSectionError,
    SectionSpec,
    build_section_state,
    complement_basis,
    residual_energy,
    reverse_velocity,
    sample_shapes,
    theorem_r0,
    tight_binary_shape,
)


@pytest.mark.parametrize("K, r0, r1", [
    (3.0, 1 / 18, 0.25 / (2 * math.sqrt(1 / 18))),   # 0.5 * min(1/9, 0.3536) ; r1 ~ 0.53033
    (10.0, 0.005, 0.25 / (2 * math.sqrt(0.005))),    # 0.5 * min(1/100, 0.3536); r1 ~ 1.7678
    (1.0, 0.5 * math.sqrt(0.125), 0.25 / (2 * math.sqrt(0.5 * math.sqrt(0.125)))),
])
def test_theorem_r0(cons, K, r0, r1):
    got = theorem_r0(K, cons)
    assert got == pytest.approx((r0, r1), rel=1e-14)


def test_theorem_r0_values_match_hand_arithmetic(cons):
    assert theorem_r0(3.0, cons)[1] == pytest.approx(0.53033, abs=1e-5)
    assert theorem_r0(10.0, cons)[1] == pytest.approx(1.76777, abs=1e-5)


@pytest.mark.parametrize("K, c", [(0.0, ConservedPair(-1, 0.5)), (3.0, ConservedPair(1, 0.5)),
                                  (3.0, ConservedPair(-1, 0.0))])
def test_theorem_r0_rejects(K, c):
    with pytest.raises(ValueError):
        theorem_r0(K, c)


@settings(max_examples=100, deadline=None)
@given(masses, vec4, st.floats(0, 2 * math.pi))
def test_complement_basis_is_orthonormal(mass, s, theta):
    assume(np.linalg.norm(s) > 1e-3)
    s = s / math.sqrt(float(mass_inner(s, s, mass)))
    e = complement_basis(s, mass)
    gram = np.array([[float(mass_inner(a, b, mass)) for b in e] for a in e])
    assert np.allclose(gram, np.eye(2), atol=1e-12)
    for v in (s, rotate_J(s)):
        assert np.allclose([float(mass_inner(v, b, mass)) for b in e], 0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(masses, st.floats(0.01, 0.3), st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi),
       st.floats(0, 2 * math.pi))
def test_section_state_has_prescribed_invariants(mass, eps, p1, p2, theta):
    cons = ConservedPair(-1.0, 0.5)
    assume(eps < 0.9 / math.sqrt(mass.mu1))
    shape = tight_binary_shape(eps, p1, p2, mass)
    assume(nonsingular(shape, mass, 1e-3))
    r0 = 0.05
    assume(residual_energy(r0, shape, cons, mass) >= 0)
    state = build_section_state(SectionSpec(r0, shape, theta, cons), mass)
    got = conserved_mcgehee(state, mass)
    assert state.r == r0
    assert float(mass_inner(state.s, state.z, mass)) == pytest.approx(0.0, abs=1e-12 * np.abs(state.z).max())
    assert got.omega == pytest.approx(cons.omega, rel=1e-12)
    assert got.h == pytest.approx(cons.h, rel=1e-9)
    assert float(energy_residual(state.r, state.s, state.z, cons, mass)) < 1e-13


def test_infeasible_section(equal, cons):
    # nearly equilateral shape has V ~ 3 < omega^2/(2 r0) + |h| r0 for r0 = 0.01
    q = tight_binary_shape(1.0, 0.0, math.pi / 2, equal)
    with pytest.raises(InfeasibleSectionError) as err:
        build_section_state(SectionSpec(0.01, q, 0.0, cons), equal)
    assert err.value.margin < 0


def test_collision_shape_rejected(equal, cons):
    with pytest.raises(SingularStateError):
        build_section_state(SectionSpec(0.05, [0.0, 0.0, 1.0, 0.0], 0.0, cons), equal)


def test_reverse_velocity(equal, cons):
    s = sample_shapes(1, equal)[0]
    st_ = build_section_state(SectionSpec(1 / 18, s, 0.3, cons), equal)
    rv = reverse_velocity(st_)
    c = conserved_mcgehee(rv, equal)
    assert c.h == pytest.approx(cons.h, rel=1e-12) and c.omega == pytest.approx(-cons.omega, rel=1e-12)
    assert np.array_equal(reverse_velocity(rv).z, st_.z)


def test_theorem_admissible(cons):
    s = np.array([0.1, 0, 1.2, 0])
    assert SectionSpec(1 / 18, s, 0.0, cons).theorem_admissible()
    assert not SectionSpec(1.0, s, 0.0, cons).theorem_admissible()
    assert not SectionSpec(0.01, s, 0.0, ConservedPair(1.0, 0.5)).theorem_admissible()


@pytest.mark.parametrize("family", ["tight_binary", "uniform"])
def test_sample_shapes_deterministic_and_valid(equal, family):
    a = sample_shapes(20, equal, seed=5, family=family)
    b = sample_shapes(20, equal, seed=5, family=family)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    for s in a:
        assert float(mass_inner(s, s, equal)) == pytest.approx(1.0, abs=1e-14)
        assert min(pair_distances(s, equal)) >= 1e-4
    if family == "tight_binary":
        ratios = [pair_distances(s, equal)[0] for s in a]
        assert 1e-3 <= min(ratios) and max(ratios) <= 0.1 * (1 + 1e-12)


def test_sample_shapes_rejects_bad_input(equal):
    with pytest.raises(ValueError):
        sample_shapes(0, equal)
    with pytest.raises(ValueError):
        sample_shapes(3, equal, family="other")
    with pytest.raises(ValueError):
        sample_shapes(3, equal, eps_range=(0.2, 0.1))


def test_tight_binary_ratio_and_size():
    mass = derive_mass_constants(1, 2, 3)
    s = tight_binary_shape(0.05, 0.3, 1.1, mass)
    assert float(mass_inner(s, s, mass)) == pytest.approx(1.0, rel=1e-14)
    assert pair_distances(s, mass)[0] == pytest.approx(0.05, rel=1e-14)
    assert float(shape_potential_V(s, mass)) > mass.m1 * mass.m2 / 0.05
