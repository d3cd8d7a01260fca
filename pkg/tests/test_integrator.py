import math

import numpy as np
import pytest

from tribody import kernels
from tribody.dynamics import (
    ConservedPair,
    JacobiState,
    blowdown,
    blowup,
    conserved,
    derive_mass_constants,
    lagrange_equilateral,
    mass_inner,
)
from tribody.integrator import (
    EventSpec,
    IntegratorConfig,
    PhasePlan,
    integrate,
    instantaneous_conserved,
    reparametrize,
    run_branch,
    sample_table,
)
from tribody.section import SectionSpec, build_section_state, sample_shapes, theorem_r0


def rel_err(a, b):
    return np.abs(a - b).max() / np.abs(b).max()


@pytest.mark.parametrize("bad", [dict(rtol=0), dict(atol=-1), dict(min_step=1.0, max_step=0.5),
                                 dict(max_steps=0), dict(root_tol=0), dict(sample_stride=0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        IntegratorConfig(**bad)


@pytest.mark.parametrize("bad", [dict(kind="nope"), dict(kind="r-crosses-level", direction="up"),
                                 dict(kind="r-crosses-level", action="halt"),
                                 dict(kind="r-crosses-level", level=math.inf)])
def test_event_spec_validation(bad):
    with pytest.raises(ValueError):
        EventSpec(**bad)


def test_unbounded_run_needs_a_stop(equal):
    st, _ = lagrange_equilateral(equal)
    with pytest.raises(ValueError):
        integrate("jacobi", st, equal, [EventSpec("r-crosses-level", 2.0)])
    with pytest.raises(ValueError):
        integrate("jacobi", st, equal, span=-1.0)
    with pytest.raises(TypeError):
        integrate("mcgehee", st, equal, span=1.0)


@pytest.mark.parametrize("formulation", ["jacobi", "mcgehee"])
def test_zero_span_gives_initial_sample(equal, formulation):
    st, _ = lagrange_equilateral(equal)
    start = st if formulation == "jacobi" else blowup(st, equal)
    tr = integrate(formulation, start, equal, span=0.0)
    assert len(tr) == 1 and tr.reason == "span-end"
    assert np.array_equal(tr.y[0], start.as_array())


@pytest.mark.parametrize("m", [(1, 1, 1), (1, 2, 3)])
def test_lagrange_orbit_returns_after_one_period(m):
    mass = derive_mass_constants(*m)
    st, period = lagrange_equilateral(mass)
    tr = integrate("jacobi", st, mass, span=period)
    assert tr.x[-1] == pytest.approx(period, rel=1e-15)
    assert rel_err(tr.y[-1], st.as_array()) <= 1e-7


def test_lagrange_orbit_is_rigid_rotation(equal):
    """Closed form: positions rotate at the orbital rate, sizes stay fixed."""
    st, period = lagrange_equilateral(equal)
    tr = integrate("jacobi", st, equal, span=period, grid_dx=period / 16)
    rate = 2 * math.pi / period
    for t, y in zip(tr.grid_x, tr.grid_y):
        c, s = math.cos(rate * t), math.sin(rate * t)
        rot = np.array([[c, -s], [s, c]])
        exact = np.concatenate([rot @ st.x[:2], rot @ st.x[2:]])
        assert np.allclose(y[:4], exact, atol=1e-8)


def test_tightening_tolerance_improves_return(equal):
    st, period = lagrange_equilateral(equal)
    errs = []
    for rtol in (1e-7, 1e-8):
        tr = integrate("jacobi", st, equal, config=IntegratorConfig(rtol=rtol, atol=rtol * 1e-2), span=period)
        errs.append(rel_err(tr.y[-1], st.as_array()))
    assert errs[1] * 5 <= errs[0]


def test_lagrange_conservation_over_ten_periods(equal):
    st, period = lagrange_equilateral(equal)
    c0 = conserved(st, equal)
    tr = integrate("jacobi", st, equal, span=10 * period)
    h, om = instantaneous_conserved(tr, equal)
    assert np.abs(h - c0.h).max() / abs(c0.h) <= 1e-8
    assert np.abs(om - c0.omega).max() / abs(c0.omega) <= 1e-8


def test_constant_size_gives_linear_time(equal):
    st, period = lagrange_equilateral(equal)
    b = blowup(st, equal)
    tr = integrate("mcgehee", b, equal, span=period / b.r**1.5)
    assert np.allclose(tr.y[:, 9], b.r**1.5 * tr.x, rtol=1e-9, atol=1e-12)
    t = reparametrize(tr)
    assert np.all(np.diff(t.x) > 0)
    assert rel_err(t.y[-1], st.as_array()) <= 1e-7


@pytest.fixture(scope="module")
def section_run():
    mass = derive_mass_constants(1, 1, 1)
    cons = ConservedPair(-1.0, 0.5)
    r0, r1 = theorem_r0(3.0, cons)
    st = build_section_state(SectionSpec(r0, sample_shapes(1, mass)[0], 0.0, cons), mass)
    return mass, cons, r0, r1, st, run_branch(st, mass, cons, r1)


def test_section_run_events(section_run):
    mass, cons, r0, r1, st, br = section_run
    near = br.near
    turn = near.events_named("turn")[0]
    assert turn.x == 0.0 and turn.index == 0
    tau1 = near.event("tau1")
    assert tau1.state[0] == pytest.approx(r1, abs=1e-10)
    assert near.y[tau1.index][0] == tau1.state[0]
    assert near.reason == "event:switch" and near.y[-1][0] == pytest.approx(2 * r1, abs=1e-10)


def test_event_states_satisfy_event_equations(section_run):
    mass, cons, r0, r1, st, br = section_run
    for tr, mode in ((br.near, kernels.MODE_MCGEHEE), (br.far, kernels.MODE_JACOBI)):
        for ev in tr.events:
            g = kernels.event_value(mode, mass.params(), {"v-zero-crossing": kernels.EV_V,
                                                           "r-crosses-level": kernels.EV_R,
                                                           "rho-crosses-level": kernels.EV_RHO}[ev.spec.kind],
                                    ev.spec.level, ev.x, ev.state)
            # root tolerance in the independent variable, times the local slope
            assert abs(g) <= 1e-8 * max(1.0, abs(ev.spec.level))


def test_samples_strictly_monotone(section_run):
    *_, br = section_run
    assert np.all(np.diff(br.near.x) > 0)
    assert np.all(np.diff(br.near.t) > 0)
    assert np.all(np.diff(br.far.x) > 0)


def test_t_accum_continues_into_escape_phase(section_run):
    *_, br = section_run
    assert br.far.x[0] == pytest.approx(br.near.y[-1, 9], rel=1e-15)
    assert br.reason == "complete"


def test_blown_up_v_matches_radial_speed(section_run):
    """v = sqrt(r) dr/dt, with dr/dt differenced on a fine uniform t resample."""
    mass, cons, r0, r1, st, br = section_run
    dt = 1e-6
    jt = integrate("jacobi", blowdown(st), mass, span=2e-3, grid_dx=dt)
    x, xd = jt.grid_y[:, :4], jt.grid_y[:, 4:]
    r = np.sqrt(mass_inner(x, x, mass))
    drdt = (-r[4:] + 8 * r[3:-1] - 8 * r[1:-3] + r[:-4]) / (12 * dt)
    v = np.array([float(mass_inner(b.s, b.z, mass)) for b in
                  (blowup(JacobiState(p, q), mass) for p, q in zip(x[2:-2], xd[2:-2]))])
    assert np.allclose(np.sqrt(r[2:-2]) * drdt, v, rtol=1e-6, atol=1e-6 * np.abs(v).max())


@pytest.mark.parametrize("K", [3.0])
def test_dual_formulation_agreement(equal, K):
    """Same initial condition in t (Jacobi) and tau (blow-up, reparametrized)."""
    cons = ConservedPair(-1.0, 0.5)
    r0, _ = theorem_r0(K, cons)
    st = blowdown(build_section_state(SectionSpec(r0 * 4, sample_shapes(2, equal)[1], 0.5, cons), equal))
    t_end = 0.3
    jt = integrate("jacobi", st, equal, span=t_end, grid_dx=0.01)
    mt = integrate("mcgehee", blowup(st, equal),
                   equal, [EventSpec("time-limit", t_end, "rising", "stop")], grid_dx=0.05)
    tt = reparametrize(mt)
    assert tt.x[-1] == pytest.approx(t_end, abs=1e-12)
    assert rel_err(tt.y[-1], jt.y[-1]) <= 1e-6


def test_budget_and_close_encounter(equal):
    st, period = lagrange_equilateral(equal)
    tr = integrate("jacobi", st, equal, config=IntegratorConfig(max_steps=5), span=period)
    assert tr.reason == "budget" and tr.stats["steps"] == 5
    # head-on binary collision with zero angular momentum
    head_on = JacobiState([1.0, 0.0, 0.0, 3.0], [-1.0, 0.0, 0.0, 0.0])
    tr = integrate("jacobi", head_on, equal, span=10.0)
    assert tr.reason == "close-encounter"


def test_record_and_stop_events(equal):
    st, period = lagrange_equilateral(equal)
    tr = integrate("jacobi", st, equal, [EventSpec("time-limit", period / 3, "rising", "record", "third"),
                                         EventSpec("time-limit", period / 2, "rising", "stop", "half")])
    assert tr.reason == "event:half"
    assert tr.x[-1] == pytest.approx(period / 2, abs=1e-12)
    third = tr.event("third")
    assert third.x == pytest.approx(period / 3, abs=1e-12)
    assert np.array_equal(tr.y[third.index], third.state)


def test_sample_stride_thins_output(equal):
    st, period = lagrange_equilateral(equal)
    full = integrate("jacobi", st, equal, span=period)
    thin = integrate("jacobi", st, equal, config=IntegratorConfig(sample_stride=4), span=period)
    assert len(thin) < len(full) and thin.x[-1] == full.x[-1]
    assert np.array_equal(thin.y[-1], full.y[-1])


def test_phase_plan_validation():
    with pytest.raises(ValueError):
        PhasePlan(switch_factor=1.0)
    with pytest.raises(ValueError):
        PhasePlan(t_max=0)


def test_energy_relation_along_tau_run(section_run):
    """Blown-up energy residual stays within 100x the local tolerance."""
    mass, cons, r0, r1, st, br = section_run
    r, s, z = br.near.y[:, 0], br.near.y[:, 1:5], br.near.y[:, 5:9]
    from tribody.dynamics import shape_potential_V

    V = shape_potential_V(s, mass)
    res = np.abs(0.5 * mass_inner(z, z, mass) - V - r * cons.h) / np.maximum.accumulate(np.maximum(1, V))
    assert res.max() <= 100 * 1e-10
