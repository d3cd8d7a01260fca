"""Inequality monitors along trajectories and the large-potential certificate.

Every check returns a list of :class:`MonitorEntry`.  Margins are signed
(negative means violated), normalised as stated per check, and recomputed
from the stored samples alone.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import ConservedPair, MassSystem, f_initial, mass_inner, shape_potential_V
from .integrator import Branch, Trajectory, grid_table, instantaneous_conserved, sample_table

#: per-step slack for monotonicity checks, relative to 1 + |quantity|
MONOTONE_TOL = 1e-9


class InadmissibleRunError(ValueError):
    """A bound check was asked for on a run that does not satisfy its hypotheses."""


@dataclass
class MonitorEntry:
    name: str
    samples: int
    worst_margin: float
    worst_index: int
    tolerance: float
    passed: bool
    detail: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["worst_margin"] = _finite(self.worst_margin)
        return d


def _finite(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _entry(name, margins, tol, offset=0, **detail) -> MonitorEntry:
    margins = np.asarray(margins, dtype=float)
    if margins.size == 0:
        return MonitorEntry(name, 0, math.inf, -1, tol, True, detail)
    bad = ~np.isfinite(margins)
    margins = np.where(bad, -np.inf, margins)
    k = int(np.argmin(margins))
    worst = float(margins[k])
    return MonitorEntry(name, int(margins.size), worst, k + offset, tol, bool(worst >= -tol), detail)


def _fail(name, reason, **detail) -> MonitorEntry:
    return MonitorEntry(name, 0, -math.inf, -1, 0.0, False, {"reason": reason, **detail})


def _monotone_margins(q):
    """Per-step increments of ``q`` scaled by 1 + |q|; index k refers to step k -> k+1."""
    q = np.asarray(q, dtype=float)
    return np.diff(q) / (1.0 + np.abs(q[:-1]))


def _blown(traj: Trajectory, mass: MassSystem, which="samples"):
    """(r, s, z) arrays for any formulation."""
    y = traj.y if which == "samples" else traj.grid_y
    if traj.formulation == "mcgehee":
        return y[:, 0], y[:, 1:5], y[:, 5:9]
    pos, vel = y[:, :4], y[:, 4:8]
    r = np.sqrt(mass_inner(pos, pos, mass))
    return r, pos / r[:, None], vel * np.sqrt(r)[:, None]


# -- conservation ------------------------------------------------------------------

def check_conservation(traj: Trajectory, mass: MassSystem, cons: ConservedPair, tol: float = 1e-8,
                       scale: str = "h", prior_scale: float = 0.0) -> list[MonitorEntry]:
    """Drift of h and omega against the frozen values.

    ``scale="h"`` measures relative drift against |h| and |omega|, allowing
    ``tol`` per 10 time units.  ``scale="energy"`` measures the energy drift
    against max(|h|, max U so far), the largest pair of cancelling terms in
    T - U the run has passed through; use it for runs through close encounters.
    ``prior_scale`` seeds that maximum when ``traj`` continues an earlier run.
    """
    h, om = instantaneous_conserved(traj, mass)
    t = traj.t
    duration = float(t[-1] - t[0]) if len(t) else 0.0
    allow = tol * max(1.0, duration / 10.0)
    if scale == "energy":
        U = sample_table(traj, mass, cons)["U"]
        h_scale = np.maximum(max(abs(cons.h), prior_scale), np.maximum.accumulate(U))
        om_scale = np.maximum(abs(cons.omega), 1e-300)
    elif scale == "h":
        h_scale = max(abs(cons.h), 1e-300)
        om_scale = max(abs(cons.omega), 1e-300)
    else:
        raise ValueError(f"unknown scale {scale!r}")
    dh = np.abs(h - cons.h) / h_scale
    dom = np.abs(om - cons.omega) / om_scale
    return [
        _entry("conservation.h", allow - dh, 0.0, max_drift=float(dh.max()), allowed=allow, scale=scale),
        _entry("conservation.omega", allow - dom, 0.0, max_drift=float(dom.max()), allowed=allow),
    ]


# -- pointwise inequalities -------------------------------------------------------

def energy_residuals(traj: Trajectory, mass: MassSystem, cons: ConservedPair, prior_scale: float = 0.0):
    """|1/2 |z|^2 - V(s) - r h| over max(1, largest V reached so far)."""
    r, s, z = _blown(traj, mass)
    V = shape_potential_V(s, mass)
    res = np.abs(0.5 * mass_inner(z, z, mass) - V - r * cons.h)
    return res / np.maximum(max(1.0, prior_scale), np.maximum.accumulate(V))


def check_energy_relation(traj: Trajectory, mass: MassSystem, cons: ConservedPair, tol: float = 1e-8,
                          prior_scale: float = 0.0) -> list[MonitorEntry]:
    """Blown-up energy relation 1/2 |z|^2 - V = r h with the frozen h.

    The residual is measured against the largest potential the run has reached,
    because error committed at a deep binary pericentre persists after V drops.
    """
    res = energy_residuals(traj, mass, cons, prior_scale)
    return [_entry("energy-relation", tol - res, 0.0, max_residual=float(res.max()))]


def projection_margins(r, s, z, omega, mass: MassSystem):
    """(|z|^2 - v^2 - omega^2/r) / max(1, |z|^2); non-negative for every state."""
    zz = mass_inner(z, z, mass)
    v = mass_inner(s, z, mass)
    return (zz - v * v - omega**2 / r) / np.maximum(1.0, zz)


def check_projection_bound(traj: Trajectory, mass: MassSystem, cons: ConservedPair,
                           tol: float = 1e-9) -> list[MonitorEntry]:
    r, s, z = _blown(traj, mass)
    return [_entry("projection-bound", projection_margins(r, s, z, cons.omega, mass), tol)]


def vprime_analytic(r, s, z, h, mass: MassSystem):
    """dv/dtau = 1/2 |z|^2 - 1/2 v^2 + r h."""
    v = mass_inner(s, z, mass)
    return 0.5 * mass_inner(z, z, mass) - 0.5 * v * v + r * h


def check_vprime(traj: Trajectory, mass: MassSystem, cons: ConservedPair, tol: float = 1e-9,
                 fd_floor: float = 1e-9) -> list[MonitorEntry]:
    """Finite-difference match of dv/dtau and the lower bound near collision.

    The finite-difference part differences v over the accepted steps with the
    three-point non-uniform formula.  Its truncation error h_- h_+ |v'''| / 6 is
    estimated from second differences of the analytic derivative; twice that
    plus ``fd_floor`` relative to max(1, |z|^2) is allowed.
    """
    if traj.formulation != "mcgehee":
        raise ValueError("check_vprime needs a tau-mode trajectory")
    out = []
    r, s, z = _blown(traj, mass)
    a = vprime_analytic(r, s, z, cons.h, mass)
    keep = np.flatnonzero(np.diff(traj.x, prepend=-np.inf) > 0)
    if keep.size >= 3:
        x, vk, ak = traj.x[keep], mass_inner(s[keep], z[keep], mass), a[keep]
        hm, hp = np.diff(x)[:-1], np.diff(x)[1:]
        d = (hm**2 * (vk[2:] - vk[1:-1]) + hp**2 * (vk[1:-1] - vk[:-2])) / (hm * hp * (hm + hp))
        a2 = 2 * ((ak[2:] - ak[1:-1]) / hp - (ak[1:-1] - ak[:-2]) / hm) / (hm + hp)
        scale = np.maximum(1.0, mass_inner(z[keep[1:-1]], z[keep[1:-1]], mass))
        # |a''| can vanish at an inflection; take the largest neighbouring value
        a2 = np.abs(a2)
        a2 = np.maximum(a2, np.maximum(np.r_[a2[1:], 0.0], np.r_[0.0, a2[:-1]]))
        allowed = hm * hp * a2 / 3 + fd_floor * scale
        e = _entry("vprime.finite-difference", (allowed - np.abs(d - ak[1:-1])) / scale, 0.0)
        if e.worst_index >= 0:
            e.worst_index = int(keep[1 + e.worst_index])
        out.append(e)
    else:
        out.append(MonitorEntry("vprime.finite-difference", 0, math.inf, -1, 0.0, True,
                                {"reason": "fewer than 3 distinct samples"}))
    r, s, z = _blown(traj, mass)
    inside = r * r < cons.omega**2 / (2 * abs(cons.h))
    a = vprime_analytic(r, s, z, cons.h, mass)
    bound = cons.omega**2 / (2 * r) + r * cons.h
    scale = np.maximum(1.0, mass_inner(z, z, mass))
    idx = np.flatnonzero(inside)
    out.append(_entry("vprime.lower-bound", ((a - bound) / scale)[idx], tol,
                      samples_inside=int(idx.size)))
    v = mass_inner(s, z, mass)
    both = inside[:-1] & inside[1:]
    steps = np.flatnonzero(both)
    out.append(_entry("vprime.v-increasing", _monotone_margins(v)[steps], MONOTONE_TOL))
    return out


def v_nonnegative_segments(v) -> list[tuple[int, int]]:
    """Maximal index ranges [i, j] (inclusive) with v >= 0."""
    v = np.asarray(v)
    segs = []
    start = None
    for k, ok in enumerate(v >= 0):
        if ok and start is None:
            start = k
        elif not ok and start is not None:
            segs.append((start, k - 1))
            start = None
    if start is not None:
        segs.append((start, len(v) - 1))
    return segs


def check_F(traj: Trajectory, mass: MassSystem, cons: ConservedPair, r0: float | None = None,
            tol: float = 1e-9) -> list[MonitorEntry]:
    """Sundman-Birkhoff function checks.

    F must not decrease along v >= 0 segments; 2V >= F holds pointwise.  When
    the run starts on the section (``r0`` given, v = 0 at sample 0) the initial
    segment also satisfies v^2 >= F0 - omega^2/r - 2|h| r, and wherever v
    returns to zero the size obeys r >= omega^2/(2|h| r0).
    """
    tab = sample_table(traj, mass, cons)
    F, V, v, r = tab["F"], tab["V"], tab["v"], tab["r"]
    inc = []
    for i, j in v_nonnegative_segments(v):
        if j > i:
            m = _monotone_margins(F[i:j + 1])
            inc.append((i, m))
    if inc:
        margins = np.concatenate([m for _, m in inc])
        offsets = np.concatenate([np.arange(i, i + len(m)) for i, m in inc])
        e = _entry("F.non-decreasing", margins, MONOTONE_TOL)
        if e.worst_index >= 0:
            e.worst_index = int(offsets[e.worst_index])
    else:
        e = MonitorEntry("F.non-decreasing", 0, math.inf, -1, MONOTONE_TOL, True)
    out = [e, _entry("F.2V-bound", (2 * V - F) / np.maximum(1.0, 2 * V), tol)]
    if r0 is not None:
        F0 = f_initial(r0, cons)
        segs = v_nonnegative_segments(np.where(np.arange(len(v)) == 0, 0.0, v))
        i, j = segs[0] if segs and segs[0][0] == 0 else (0, 0)
        rr, vv = r[i:j + 1], v[i:j + 1]
        lower = F0 - cons.omega**2 / rr - 2 * abs(cons.h) * rr
        out.append(_entry("F.v-squared-bound", (vv * vv - lower) / max(1.0, F0), tol, F0=F0))
        turn_r = cons.omega**2 / (2 * abs(cons.h) * r0)
        ret = [ev for ev in traj.events_named("turn") if ev.x > traj.x[0]]
        if ret:
            rs = np.array([r[ev.index] for ev in ret])
            out.append(_entry("F.turning-radius", (rs - turn_r) / turn_r, tol, bound=turn_r))
        else:
            out.append(MonitorEntry("F.turning-radius", 0, math.inf, -1, tol, True,
                                    {"bound": turn_r, "turns": 0}))
    return out


# -- near-collision bounds ----------------------------------------------------------

def lemma1_bounds(r0: float, r1: float, cons: ConservedPair) -> dict:
    om2, ah = cons.omega**2, abs(cons.h)
    return {
        "V": om2 / (2 * r0) + ah * r0,
        "U": om2 / (2 * r0 * r1) + ah * r0 / r1,
        "v1_squared": (r1 - r0) * (om2 / (2 * r0 * r1) - 2 * ah),
        "U_sqrt": 1.0 / math.sqrt(r0),
    }


def check_lemma1(traj: Trajectory, r0: float, r1: float, mass: MassSystem, cons: ConservedPair,
                 tol: float = 1e-9) -> list[MonitorEntry]:
    """Near-collision estimates on [0, tau1], tau1 being where r first reaches r1."""
    om2, ah = cons.omega**2, abs(cons.h)
    if not r1 < om2 / (2 * ah * r0):
        raise InadmissibleRunError(f"r1 = {r1:.6g} is not below omega^2/(2|h| r0) = {om2 / (2 * ah * r0):.6g}")
    ev = traj.event("tau1")
    if ev is None:
        raise InadmissibleRunError("run never reached r1")
    tab = sample_table(traj, mass, cons)
    k = ev.index
    b = lemma1_bounds(r0, r1, cons)
    r, V, U, v = tab["r"][:k + 1], tab["V"][:k + 1], tab["U"][:k + 1], tab["v"][:k + 1]
    out = [
        _entry("lemma1.r-increasing", _monotone_margins(r), MONOTONE_TOL, tau1=float(traj.x[k])),
        _entry("lemma1.V-bound", (V - b["V"]) / max(1.0, b["V"]), tol, bound=b["V"]),
        _entry("lemma1.U-bound", (U - b["U"]) / max(1.0, b["U"]), tol, bound=b["U"]),
        _entry("lemma1.v1-bound", [(v[-1] ** 2 - b["v1_squared"]) / max(1.0, abs(b["v1_squared"]))], tol,
               offset=k, bound=b["v1_squared"], v1_squared=float(v[-1] ** 2)),
    ]
    if math.isclose(r1, math.sqrt(om2) ** 2 / (2 * math.sqrt(r0)), rel_tol=1e-12):
        out.append(_entry("lemma1.U-sqrt-bound", (U - b["U_sqrt"]) / max(1.0, b["U_sqrt"]), tol,
                          bound=b["U_sqrt"]))
    return out


# -- escape ------------------------------------------------------------------------

def escape_conditions(row: dict, mass: MassSystem, cons: ConservedPair, K: float) -> dict:
    threshold = 2 * mass.alpha / abs(cons.h)
    need = math.sqrt(2 * K / mass.mu2)
    return {
        "rho": float(row["rho"]), "rhodot": float(row["rhodot"]), "G": float(row["G"]),
        "r12": float(row["r12"]), "r13": float(row["r13"]), "r23": float(row["r23"]),
        "alpha": mass.alpha, "rho_threshold": threshold, "rhodot_required": need,
        "rho_ok": bool(row["rho"] > threshold),
        "G_ok": bool(row["G"] > 0),
        "rhodot_ok": bool(row["rhodot"] >= need),
        "r12_smallest": bool(row["r12"] < min(row["r13"], row["r23"])),
    }


def check_escape(traj: Trajectory, mass: MassSystem, cons: ConservedPair, K: float,
                 tol: float = 1e-9, fd_tol: float = 1e-6) -> list[MonitorEntry]:
    """Kepler-comparison escape certificate from t1 (event ``t1``) to the window end."""
    ev = traj.event("t1")
    if ev is None:
        return [_fail("escape.anchor", "trajectory never reached the escape anchor")]
    tab = sample_table(traj, mass, cons)
    k = ev.index
    win = {name: col[k:] for name, col in tab.items()}

    def row(i):
        return {name: col[i] for name, col in win.items()}

    start = escape_conditions(row(0), mass, cons, K)
    end = escape_conditions(row(-1), mass, cons, K)
    out = []
    for tag, c in (("t1", start), ("end", end)):
        if not c["r12_smallest"]:
            out.append(_fail(f"escape.{tag}.r12-smallest", "certificate refused: r12 is not the smallest distance",
                             **c))
            continue
        out.append(_entry(f"escape.{tag}.rho-threshold", [(c["rho"] - c["rho_threshold"]) / c["rho_threshold"]],
                          0.0, offset=k, **c))
        out.append(_entry(f"escape.{tag}.G-positive", [c["G"] / max(1.0, abs(c["G"]))], 0.0, offset=k))
        out.append(_entry(f"escape.{tag}.rhodot", [(c["rhodot"] - c["rhodot_required"]) / c["rhodot_required"]],
                          0.0, offset=k))
    rho, G, U = win["rho"], win["G"], win["U"]
    out.append(_entry("escape.rho-increasing", _monotone_margins(rho), MONOTONE_TOL, offset=k))
    out.append(_entry("escape.G-non-decreasing", _monotone_margins(G), MONOTONE_TOL, offset=k))
    pair_gap = (np.minimum(win["r13"], win["r23"]) - win["r12"]) / win["rho"]
    out.append(_entry("escape.r12-smallest", pair_gap, 0.0, offset=k))
    out.append(_entry("escape.U-above-K", (U - K) / K, tol, offset=k))
    out.append(_entry("escape.U-above-rho-kinetic", (U - 0.5 * mass.mu2 * win["rhodot"] ** 2) / np.maximum(1.0, U),
                      tol, offset=k))
    # rho'' from centered second differences on the uniform resample
    gx = traj.grid_x
    sel = np.flatnonzero(gx >= traj.x[k])
    if len(sel) >= 3:
        g = grid_table(traj, mass, cons)
        dx = gx[1] - gx[0]
        rg = g["rho"][sel]
        rdd = (rg[2:] - 2 * rg[1:-1] + rg[:-2]) / dx**2
        bound = -mass.kepler_coefficient / rg[1:-1] ** 2
        out.append(_entry("escape.rho-ddot-bound", (rdd - bound) / (1.0 + np.abs(bound)), fd_tol,
                          grid_points=int(len(sel)), grid_spacing=float(dx)))
    else:
        out.append(MonitorEntry("escape.rho-ddot-bound", 0, math.inf, -1, fd_tol, True,
                                {"reason": "fewer than 3 resample points in window"}))
    return out


# -- certificate ---------------------------------------------------------------------

@dataclass
class BranchResult:
    direction: str
    reason: str
    tau1: float | None
    t1: float | None
    t_end: float | None
    U_min: float
    escape_t1: dict | None
    escape_end: dict | None
    entries: list[MonitorEntry]
    steps: int

    @property
    def passed(self) -> bool:
        return self.reason == "complete" and all(e.passed for e in self.entries if e.name in VERDICT_CHECKS
                                                 or e.name.split(".")[0] in VERDICT_GROUPS)


VERDICT_GROUPS = ("lemma1", "escape")
VERDICT_CHECKS = ("window.U-above-K",)


@dataclass
class TheoremCertificate:
    K: float
    r0: float
    r1: float
    masses: tuple
    h: float
    omega: float
    near_phase_bound: float
    U_min: float
    window: tuple
    forward: BranchResult
    backward: BranchResult
    verdict: bool
    reasons: list[str]

    def as_dict(self) -> dict:
        def branch(b: BranchResult):
            return {
                "direction": b.direction, "reason": b.reason, "tau1": b.tau1, "t1": b.t1, "t_end": b.t_end,
                "U_min": _finite(b.U_min), "escape_t1": b.escape_t1, "escape_end": b.escape_end, "steps": b.steps,
                "passed": b.passed, "checks": [e.as_dict() for e in b.entries],
            }

        return {
            "K": self.K, "r0": self.r0, "r1": self.r1, "masses": list(self.masses), "h": self.h,
            "omega": self.omega, "near_phase_bound": self.near_phase_bound, "U_min": _finite(self.U_min),
            "window": list(self.window), "verdict": self.verdict, "reasons": self.reasons,
            "forward": branch(self.forward), "backward": branch(self.backward),
        }


def assess_branch(branch: Branch, direction: str, K: float, r0: float, mass: MassSystem,
                  cons: ConservedPair, full: bool = True) -> BranchResult:
    """Run every monitor on one branch; ``full`` adds the diagnostic (non-verdict) checks."""
    entries: list[MonitorEntry] = []
    near = branch.near
    Us = [sample_table(near, mass, cons)["U"]]
    if len(near.grid_x):
        Us.append(grid_table(near, mass, cons)["U"])
    try:
        entries += check_lemma1(near, r0, branch.r1, mass, cons)
    except InadmissibleRunError as exc:
        entries.append(_fail("lemma1.admissible", str(exc)))
    if full:
        entries += check_projection_bound(near, mass, cons)
        entries += check_vprime(near, mass, cons)
        entries += check_F(near, mass, cons, r0=r0)
        entries += check_energy_relation(near, mass, cons)
        entries += check_conservation(near, mass, cons, scale="energy")
    tau1 = near.event("tau1").x if near.event("tau1") else None
    t1 = t_end = None
    esc_t1 = esc_end = None
    if branch.far is not None:
        far = branch.far
        ftab = sample_table(far, mass, cons)
        Us.append(ftab["U"])
        if len(far.grid_x):
            Us.append(grid_table(far, mass, cons)["U"])
        esc = check_escape(far, mass, cons, K)
        entries += esc
        if full:
            prior = float(np.max(Us[0]))
            entries += check_energy_relation(far, mass, cons, prior_scale=prior)
            entries += check_conservation(far, mass, cons, scale="energy", prior_scale=prior)
        ev = far.event("t1")
        t1 = float(ev.x) if ev else None
        t_end = float(far.x[-1])
        if ev is not None:
            esc_t1 = escape_conditions({k: c[ev.index] for k, c in ftab.items()}, mass, cons, K)
            esc_end = escape_conditions({k: c[-1] for k, c in ftab.items()}, mass, cons, K)
    else:
        entries.append(_fail("escape.reached", f"escape phase not reached ({branch.reason})"))
    U_all = np.concatenate(Us)
    entries.append(_entry("window.U-above-K", (U_all - K) / K, 1e-9, U_min=float(U_all.min())))
    steps = near.stats.get("steps", 0) + (branch.far.stats.get("steps", 0) if branch.far is not None else 0)
    return BranchResult(direction, branch.reason, tau1, t1, t_end, float(U_all.min()), esc_t1, esc_end,
                        entries, int(steps))


def certify_theorem(forward: Branch, backward: Branch, K: float, r0: float, mass: MassSystem,
                    cons: ConservedPair, full: bool = True) -> TheoremCertificate:
    """Combine both time branches of one section state into a certificate.

    ``backward`` must be the branch of the velocity-reversed section state; its
    physical times are reported negated.
    """
    r1 = forward.r1
    reasons = []
    near_bound = 1.0 / math.sqrt(r0)
    if near_bound < K:
        reasons.append(f"near-phase bound: 1/sqrt(r0) = {near_bound:.6g} < K = {K:.6g}")
    back_cons = ConservedPair(cons.h, -cons.omega)
    fwd = assess_branch(forward, "forward", K, r0, mass, cons, full)
    bwd = assess_branch(backward, "backward", K, r0, mass, back_cons, full)
    for b in (fwd, bwd):
        if b.reason != "complete":
            reasons.append(f"{b.direction}: run ended with {b.reason}")
        for e in b.entries:
            if not e.passed and (e.name in VERDICT_CHECKS or e.name.split(".")[0] in VERDICT_GROUPS):
                why = e.detail.get("reason", f"worst margin {e.worst_margin:.3e}")
                reasons.append(f"{b.direction}: {e.name} failed ({why})")
    verdict = not reasons and fwd.passed and bwd.passed
    window = (-(bwd.t_end or 0.0), fwd.t_end or 0.0)
    return TheoremCertificate(K, r0, r1, mass.masses, cons.h, cons.omega, near_bound,
                              min(fwd.U_min, bwd.U_min), window, fwd, bwd, verdict, reasons)
