"""Adaptive integration of either formulation with dense output and events.

The stepping itself happens in :mod:`tribody.kernels` (compiled when
available).  This module drives the stepper, locates event roots on the
DOP853 interpolant, assembles :class:`Trajectory` objects and runs the
two-phase (blow-up near collision, Jacobi far away) theorem branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .dynamics import (
    ConservedPair,
    JacobiState,
    MassSystem,
    McGeheeState,
    angular_momentum,
    blowdown,
    f_function,
    kepler_G,
    kinetic_T,
    mass_inner,
    pair_distances,
    potential_U,
    shape_potential_V,
)

FORMULATIONS = {"jacobi": kernels.MODE_JACOBI, "mcgehee": kernels.MODE_MCGEHEE}

EVENT_KINDS = {
    "v-zero-crossing": kernels.EV_V,
    "r-crosses-level": kernels.EV_R,
    "rho-crosses-level": kernels.EV_RHO,
    "pairwise-distance-below": kernels.EV_PAIR,
    "time-limit": kernels.EV_TIME,
}
DIRECTIONS = {"rising": 1, "falling": -1, "any": 0}

_BUFFER = 1 << 15


@dataclass
class IntegratorConfig:
    rtol: float = 1e-10
    atol: float = 1e-12
    first_step: float = 0.0  # 0 selects the step automatically
    min_step: float = 0.0
    max_step: float = math.inf
    max_steps: int = 20_000_000
    root_tol: float = 1e-12
    sample_stride: int = 1

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if not self.min_step < self.max_step:
            raise ValueError("min_step must be smaller than max_step")
        if self.max_steps < 1 or self.sample_stride < 1:
            raise ValueError("max_steps and sample_stride must be >= 1")
        if not self.root_tol > 0:
            raise ValueError("root_tol must be positive")


@dataclass(frozen=True)
class EventSpec:
    kind: str
    level: float = 0.0
    direction: str = "any"
    action: str = "record"
    name: str = ""

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.action not in ("record", "stop"):
            raise ValueError(f"unknown action {self.action!r}")
        if not math.isfinite(self.level):
            raise ValueError("event level must be finite")

    @property
    def label(self) -> str:
        return self.name or self.kind


@dataclass
class EventRecord:
    spec: EventSpec
    x: float
    state: np.ndarray
    index: int  # position of the event state in the trajectory samples


@dataclass
class Trajectory:
    """Ordered samples of one run.

    ``x`` is the independent variable (t for ``jacobi``, tau for ``mcgehee``);
    ``y`` holds raw kernel states, one row per sample.  ``grid_x``/``grid_y``
    are optional uniform resamples taken from the dense output.
    """

    formulation: str
    x: np.ndarray
    y: np.ndarray
    events: list[EventRecord] = field(default_factory=list)
    reason: str = "span-end"
    grid_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grid_y: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)

    @property
    def t(self) -> np.ndarray:
        """Physical time of every sample."""
        return self.x if self.formulation == "jacobi" else self.y[:, 9]

    def event(self, label: str) -> EventRecord | None:
        for ev in self.events:
            if ev.spec.label == label:
                return ev
        return None

    def events_named(self, label: str) -> list[EventRecord]:
        return [ev for ev in self.events if ev.spec.label == label]

    def state(self, i: int):
        return _as_state(self.formulation, self.x[i], self.y[i])

    @property
    def final_state(self):
        return self.state(-1)


def _as_state(formulation, x, y):
    if formulation == "jacobi":
        return JacobiState.from_array(y, t=x)
    return McGeheeState.from_array(y, tau=x)


def _start(state, formulation):
    if formulation == "jacobi":
        if not isinstance(state, JacobiState):
            raise TypeError("jacobi formulation needs a JacobiState")
        return state.t, state.as_array()
    if not isinstance(state, McGeheeState):
        raise TypeError("mcgehee formulation needs a McGeheeState")
    return state.tau, state.as_array()


def integrate(formulation: str, state, mass: MassSystem, events=(), config: IntegratorConfig | None = None,
              span: float = math.inf, grid_dx: float | None = None) -> Trajectory:
    """Integrate ``state`` forward by ``span`` in the independent variable.

    The run stops at the end of the span, at the first ``stop`` event, or on a
    numerical failure (``close-encounter`` for step underflow near a collision,
    ``budget`` when ``config.max_steps`` is exhausted).
    """
    config = config or IntegratorConfig()
    if formulation not in FORMULATIONS:
        raise ValueError(f"unknown formulation {formulation!r}")
    events = list(events)
    if not math.isfinite(span) and not any(ev.action == "stop" for ev in events):
        raise ValueError("an unbounded run needs at least one stopping event")
    if span < 0:
        raise ValueError("span must be non-negative")
    mode = FORMULATIONS[formulation]
    params = mass.params()
    x0, y0 = _start(state, formulation)
    x_end = x0 + span

    stepper = kernels.Stepper(mode, params, x0, y0, config.rtol, config.atol,
                              config.first_step, config.max_step, config.min_step)
    stepper.set_events([EVENT_KINDS[e.kind] for e in events], [e.level for e in events],
                       [DIRECTIONS[e.direction] for e in events])
    if grid_dx:
        stepper.set_grid(x0, grid_dx)

    xs, ys = [np.array([x0])], [y0[None, :]]
    gxs, gys = [], []
    records: list[EventRecord] = []
    n_samples = 1

    def g(ev, x, y):
        return kernels.event_value(mode, params, EVENT_KINDS[ev.kind], ev.level, x, y)

    last_root: dict[int, float] = {}
    for i, ev in enumerate(events):
        if ev.action == "record" and abs(g(ev, x0, y0)) <= config.root_tol * max(1.0, abs(ev.level)):
            records.append(EventRecord(ev, x0, y0.copy(), 0))
            last_root[i] = x0

    n_state = len(y0)
    out_x = np.empty(_BUFFER)
    out_y = np.empty((_BUFFER, n_state))
    grid_cap = _BUFFER if grid_dx else 1
    grid_x = np.empty(grid_cap)
    grid_y = np.empty((grid_cap, n_state))
    reason = "span-end"
    budget = config.max_steps
    stop = False
    while not stop:
        status, n, ng = stepper.run(x_end, budget - stepper.naccept, config.sample_stride,
                                    out_x, out_y, grid_x, grid_y)
        cx, cy = out_x[:n].copy(), out_y[:n].copy()
        gx, gy = grid_x[:ng].copy(), grid_y[:ng].copy()
        if status == kernels.STATUS_EVENT:
            F = stepper.dense()
            x_old, y_old, h = stepper.x_old, np.asarray(stepper.y_old), stepper.h_prev
            roots = []
            for i in np.flatnonzero(np.asarray(stepper.ev_hit)):
                ev = events[i]
                lo = g(ev, x_old, kernels.dense_eval(F, y_old, 0.0))
                hi = g(ev, x_old + h, kernels.dense_eval(F, y_old, 1.0))
                if lo == 0:
                    # root at the left end: already taken by the start check or the previous step
                    continue
                if lo * hi < 0:
                    theta = brentq(lambda th: g(ev, x_old + th * h, kernels.dense_eval(F, y_old, th)),
                                   0.0, 1.0, xtol=max(config.root_tol / h, 1e-15), maxiter=200)
                else:
                    theta = 0.0 if lo == 0 else 1.0
                roots.append((theta, i))
            roots.sort()
            for theta, i in roots:
                ev = events[i]
                xr = x_old + theta * h
                if i in last_root and abs(xr - last_root[i]) <= config.root_tol:
                    continue
                last_root[i] = xr
                yr = kernels.dense_eval(F, y_old, theta)
                if ev.action == "stop":
                    keep = cx < xr
                    cx, cy = cx[keep], cy[keep]
                    keepg = gx <= xr
                    gx, gy = gx[keepg], gy[keepg]
                    cx = np.append(cx, xr)
                    cy = np.vstack([cy, yr[None, :]])
                    records.append(EventRecord(ev, xr, yr, n_samples + len(cx) - 1))
                    reason = f"event:{ev.label}"
                    stop = True
                    break
                # record events: splice the event state in before the step-end sample
                pos = int(np.searchsorted(cx, xr))
                if pos < len(cx) and cx[pos] == xr:
                    records.append(EventRecord(ev, xr, cy[pos].copy(), n_samples + pos))
                    continue
                cx = np.insert(cx, pos, xr)
                cy = np.insert(cy, pos, yr, axis=0)
                for rec in records:
                    if rec.index >= n_samples + pos:
                        rec.index += 1
                records.append(EventRecord(ev, xr, yr, n_samples + pos))
        elif status == kernels.STATUS_END:
            stop = True
        elif status == kernels.STATUS_FULL:
            if grid_dx and stepper.grid_need > len(grid_x):
                grid_x = np.empty(2 * stepper.grid_need)
                grid_y = np.empty((2 * stepper.grid_need, n_state))
        elif status in (kernels.STATUS_UNDERFLOW, kernels.STATUS_SINGULAR):
            reason = "close-encounter"
            stop = True
        elif status == kernels.STATUS_BUDGET:
            reason = "budget"
            stop = True
        xs.append(cx)
        ys.append(cy)
        gxs.append(gx)
        gys.append(gy)
        n_samples += len(cx)

    x = np.concatenate(xs)
    y = np.concatenate(ys)
    records.sort(key=lambda r: (r.x, r.index))
    traj = Trajectory(
        formulation, x, y, records, reason,
        np.concatenate(gxs) if gxs else np.zeros(0),
        np.concatenate(gys) if gys else np.zeros((0, n_state)),
        {"steps": int(stepper.naccept), "rejected": int(stepper.nreject), "nfev": int(stepper.nfev),
         "backend": kernels.BACKEND},
    )
    if len(traj.grid_x) == 0:
        traj.grid_y = np.zeros((0, n_state))
    return traj


def reparametrize(traj: Trajectory, mass: MassSystem | None = None) -> Trajectory:
    """Re-index a tau-mode trajectory by accumulated physical time t."""
    if traj.formulation != "mcgehee":
        raise ValueError("reparametrize expects a mcgehee trajectory")

    def down(y):
        y = np.atleast_2d(y)
        r = y[:, :1]
        return np.hstack([r * y[:, 1:5], y[:, 5:9] / np.sqrt(r)])

    events = [EventRecord(ev.spec, float(ev.state[9]), down(ev.state)[0], ev.index) for ev in traj.events]
    gy = down(traj.grid_y) if len(traj.grid_x) else np.zeros((0, 8))
    gx = traj.grid_y[:, 9] if len(traj.grid_x) else np.zeros(0)
    out = Trajectory("jacobi", traj.y[:, 9].copy(), down(traj.y), events, traj.reason, gx, gy, dict(traj.stats))
    out.stats["tau"] = traj.x.copy()
    return out


# -- monitored scalars ---------------------------------------------------------

SAMPLE_COLUMNS = ("t", "tau", "x1x", "x1y", "x2x", "x2y", "v1x", "v1y", "v2x", "v2y",
                  "U", "V", "T", "r", "v", "F", "r12", "r13", "r23", "rho", "rhodot", "G")


def _scalars(formulation, x, y, mass: MassSystem, cons: ConservedPair) -> dict:
    y = np.atleast_2d(y)
    if formulation == "mcgehee":
        r = y[:, 0]
        s, z = y[:, 1:5], y[:, 5:9]
        pos = r[:, None] * s
        vel = z / np.sqrt(r)[:, None]
        t, tau = y[:, 9], np.asarray(x, dtype=float)
    else:
        pos, vel = y[:, :4], y[:, 4:8]
        r = np.sqrt(mass_inner(pos, pos, mass))
        s = pos / r[:, None]
        z = vel * np.sqrt(r)[:, None]
        t, tau = np.asarray(x, dtype=float), np.full(len(r), np.nan)
    V = shape_potential_V(s, mass)
    U = V / r
    v = mass_inner(s, z, mass)
    r12, r13, r23 = pair_distances(pos, mass)
    rho = np.hypot(pos[:, 2], pos[:, 3])
    rhodot = (pos[:, 2] * vel[:, 2] + pos[:, 3] * vel[:, 3]) / rho
    cols = {
        "t": t, "tau": tau,
        "x1x": pos[:, 0], "x1y": pos[:, 1], "x2x": pos[:, 2], "x2y": pos[:, 3],
        "v1x": vel[:, 0], "v1y": vel[:, 1], "v2x": vel[:, 2], "v2y": vel[:, 3],
        "U": U, "V": V, "T": kinetic_T(vel, mass), "r": r, "v": v,
        "F": f_function(r, v, cons), "r12": r12, "r13": r13, "r23": r23,
        "rho": rho, "rhodot": rhodot, "G": kepler_G(rho, rhodot, mass),
    }
    return cols


def sample_table(traj: Trajectory, mass: MassSystem, cons: ConservedPair) -> dict:
    """Monitored scalars recomputed from every stored sample (see SAMPLE_COLUMNS)."""
    return _scalars(traj.formulation, traj.x, traj.y, mass, cons)


def grid_table(traj: Trajectory, mass: MassSystem, cons: ConservedPair) -> dict:
    return _scalars(traj.formulation, traj.grid_x, traj.grid_y, mass, cons)


def instantaneous_conserved(traj: Trajectory, mass: MassSystem):
    """Energy and angular momentum recomputed at every sample, as two arrays."""
    y = traj.y
    if traj.formulation == "mcgehee":
        r, s, z = y[:, 0], y[:, 1:5], y[:, 5:9]
        h = (0.5 * mass_inner(z, z, mass) - shape_potential_V(s, mass)) / r
        return h, angular_momentum(s, z, mass) * np.sqrt(r)
    pos, vel = y[:, :4], y[:, 4:8]
    return kinetic_T(vel, mass) - potential_U(pos, mass), angular_momentum(pos, vel, mass)


# -- two-phase theorem branches ---------------------------------------------------

@dataclass
class PhasePlan:
    """Knobs of the near-collision/escape split of a theorem run.

    The blow-up formulation runs until ``r`` reaches ``switch_factor * r1``;
    the escape phase anchors its certificate when ``rho`` first exceeds
    ``escape_factor * 2 alpha/|h|`` and keeps verifying until ``rho`` has grown
    by a further ``tail_factor``.
    """

    switch_factor: float = 2.0
    escape_factor: float = 1.25
    tail_factor: float = 1.25
    t_max: float = 50.0
    near_grid_dx: float = 1e-3
    far_grid_dx: float = 1e-3

    def __post_init__(self):
        if self.switch_factor <= 1 or self.escape_factor <= 1 or self.tail_factor <= 1:
            raise ValueError("phase factors must exceed 1")
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")


@dataclass
class Branch:
    near: Trajectory
    far: Trajectory | None
    r1: float
    rho_anchor: float
    reason: str

    @property
    def ok(self) -> bool:
        return self.reason == "complete"


def run_branch(start: McGeheeState, mass: MassSystem, cons: ConservedPair, r1: float,
               plan: PhasePlan | None = None, config: IntegratorConfig | None = None) -> Branch:
    """Integrate one time branch from a section state.

    ``reason`` is ``complete`` when the escape tail was reached, otherwise the
    failure mode (``close-encounter``, ``budget``, ``time-limit``, ``no-switch``).
    """
    plan = plan or PhasePlan()
    config = config or IntegratorConfig()
    near_events = [
        EventSpec("v-zero-crossing", 0.0, "any", "record", "turn"),
        EventSpec("r-crosses-level", r1, "rising", "record", "tau1"),
        EventSpec("r-crosses-level", plan.switch_factor * r1, "rising", "stop", "switch"),
        EventSpec("time-limit", start.t + plan.t_max, "rising", "stop", "time-limit"),
    ]
    near = integrate("mcgehee", start, mass, near_events, config, grid_dx=plan.near_grid_dx)
    rho_anchor = plan.escape_factor * 2.0 * mass.alpha / abs(cons.h)
    if near.reason != "event:switch":
        reason = near.reason.replace("event:", "")
        return Branch(near, None, r1, rho_anchor, reason if reason != "span-end" else "no-switch")

    mid = blowdown(near.final_state)
    rho_mid = float(np.hypot(mid.x[2], mid.x[3]))
    anchor = max(rho_anchor, rho_mid)
    far_events = [
        EventSpec("v-zero-crossing", 0.0, "any", "record", "turn"),
        EventSpec("rho-crosses-level", anchor, "rising", "record", "t1"),
        EventSpec("rho-crosses-level", plan.tail_factor * anchor, "rising", "stop", "end"),
    ]
    span = max(start.t + plan.t_max - mid.t, 0.0)
    far = integrate("jacobi", mid, mass, far_events, config, span=span, grid_dx=plan.far_grid_dx)
    if anchor == rho_mid and far.event("t1") is None:
        far.events.insert(0, EventRecord(far_events[1], far.x[0], far.y[0].copy(), 0))
    if far.reason == "event:end":
        reason = "complete"
    elif far.reason == "span-end":
        reason = "time-limit"
    else:
        reason = far.reason
    return Branch(near, far, r1, anchor, reason)
