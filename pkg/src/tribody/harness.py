"""Batch drivers behind the command line: simulate, verify, scan, export.

Every driver is a pure function of its RunConfig (the seed included) plus the
files it reads.  Results go to CSV for bulk samples and JSON for reports, with
floats written by ``repr`` so that files round-trip exactly.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dynamics import (
    ConservedPair,
    JacobiState,
    SingularStateError,
    blowup,
    conserved,
    lagrange_equilateral,
    pair_distances,
)
from .integrator import (
    SAMPLE_COLUMNS,
    Branch,
    EventSpec,
    integrate,
    run_branch,
    sample_table,
)
from .monitors import (
    TheoremCertificate,
    certify_theorem,
    check_conservation,
    check_energy_relation,
    check_F,
    check_projection_bound,
    check_vprime,
)
from .section import (
    InfeasibleSectionError,
    SectionSpec,
    build_section_state,
    reverse_velocity,
    sample_shapes,
    theorem_r0,
)

log = logging.getLogger("tribody")

TRAJECTORY_SCHEMA = "tribody-trajectory v1"
EXPORT_SCHEMA = "tribody-export v1"
SCAN_SCHEMA = "tribody-scan v1"
EXPORT_COLUMNS = ("t", "U", "K", "r", "F")
SCAN_COLUMNS = ("index", "r0", "r1", "shape_index", "binary_ratio", "theta", "classification", "U_min",
                "rho_t1", "rhodot_t1", "G_t1", "steps", "reason")
CLASSIFICATIONS = ("certified", "escape-uncertified", "collision-adjacent", "budget-exceeded", "infeasible")

# columns whose sign flips when a time-reversed integration is reported in physical time
_ODD_COLUMNS = ("t", "tau", "v1x", "v1y", "v2x", "v2y", "v", "rhodot")


class ParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path, self.line = str(path), line


# -- file formats --------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path: Path, schema: str, meta: dict, columns, rows) -> None:
    """Schema comment line, header line, then one comma-separated row per record."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {schema} {json.dumps(meta, sort_keys=True)}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_table(path: Path) -> tuple[str, dict, list[str], np.ndarray]:
    """Inverse of :func:`write_table` for numeric tables; errors carry line numbers."""
    path = Path(path)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(path, 1, "empty file")
    first = lines[0]
    if not first.startswith("# "):
        raise ParseError(path, 1, "missing schema comment line")
    parts = first[2:].split(" ", 2)
    if len(parts) < 2:
        raise ParseError(path, 1, "malformed schema line")
    schema = " ".join(parts[:2])
    try:
        meta = json.loads(parts[2]) if len(parts) == 3 else {}
    except json.JSONDecodeError as exc:
        raise ParseError(path, 1, f"malformed metadata: {exc.msg}") from exc
    if len(lines) < 2 or not lines[1].strip():
        raise ParseError(path, 2, "missing header line")
    columns = lines[1].split(",")
    rows = []
    for k, row in enumerate(csv.reader(lines[2:]), start=3):
        if len(row) != len(columns):
            raise ParseError(path, k, f"expected {len(columns)} fields, found {len(row)}")
        try:
            rows.append([float(x) for x in row])
        except ValueError as exc:
            raise ParseError(path, k, str(exc)) from exc
    if not rows:
        raise ParseError(path, 3, "no data rows")
    return schema, meta, columns, np.array(rows)


def write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, allow_nan=False) + "\n")


def write_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def _table_rows(tab: dict, idx=None):
    cols = [np.asarray(tab[c]) for c in SAMPLE_COLUMNS]
    n = len(cols[0])
    for i in range(n) if idx is None else idx:
        yield [c[i] for c in cols]


# -- section runs ----------------------------------------------------------------------

@dataclass
class SectionRun:
    spec: SectionSpec
    forward: Branch
    backward: Branch
    certificate: TheoremCertificate


def section_radii(cfg: RunConfig) -> tuple[float, float]:
    """(r0, r1) from the config: pinned r0 if given, else the automatic choice for K."""
    cons = cfg.conserved
    if cfg.section.r0 is None:
        return theorem_r0(cfg.K, cons, cfg.section.safety)
    r0 = cfg.section.r0
    return r0, cons.omega**2 / (2 * math.sqrt(r0))


def run_section(cfg: RunConfig, shape, theta: float, r0: float, r1: float, full: bool = True) -> SectionRun:
    """Both time branches of one section state plus their certificate."""
    mass, cons = cfg.mass, cfg.conserved
    spec = SectionSpec(r0, np.asarray(shape, dtype=float), float(theta), cons)
    state = build_section_state(spec, mass)
    plan, icfg = cfg.phases.build(), cfg.integrator.build()
    fwd = run_branch(state, mass, cons, r1, plan, icfg)
    bwd = run_branch(reverse_velocity(state), mass, ConservedPair(cons.h, -cons.omega), r1, plan, icfg)
    cert = certify_theorem(fwd, bwd, cfg.K, r0, mass, cons, full=full)
    return SectionRun(spec, fwd, bwd, cert)


def branch_table(branch: Branch, cfg: RunConfig, reverse: bool = False) -> dict:
    """Samples of a branch in physical time: the near phase, then the escape phase.

    With ``reverse`` the branch came from the velocity-reversed state; times and
    velocity-like columns are negated so rows describe the physical solution.
    """
    mass = cfg.mass
    cons = ConservedPair(cfg.h, -cfg.omega) if reverse else cfg.conserved
    parts = [sample_table(branch.near, mass, cons)]
    if branch.far is not None:
        far = sample_table(branch.far, mass, cons)
        # the escape phase starts from the last near-phase sample
        parts.append({c: v[1:] for c, v in far.items()})
    tab = {c: np.concatenate([p[c] for p in parts]) for c in SAMPLE_COLUMNS}
    if reverse:
        for c in _ODD_COLUMNS:
            tab[c] = -tab[c]
        tab = {c: v[::-1] for c, v in tab.items()}
    return tab


def _downsample_index(n: int, keep: int, must=()) -> np.ndarray:
    if n <= keep:
        return np.arange(n)
    idx = np.unique(np.rint(np.linspace(0, n - 1, keep - len(must))).astype(int))
    return np.union1d(idx, np.asarray(must, dtype=int))


def _classify(run: SectionRun | None, exc: Exception | None = None) -> str:
    if isinstance(exc, InfeasibleSectionError):
        return "infeasible"
    if isinstance(exc, SingularStateError):
        return "collision-adjacent"
    cert = run.certificate
    if cert.verdict:
        return "certified"
    reasons = (run.forward.reason, run.backward.reason)
    if "close-encounter" in reasons:
        return "collision-adjacent"
    if "budget" in reasons:
        return "budget-exceeded"
    return "escape-uncertified"


def _escape_summary(cert: TheoremCertificate) -> dict:
    """Worst of the two branches' escape data at the anchor (nan when missing)."""
    vals = {"rho_t1": math.nan, "rhodot_t1": math.nan, "G_t1": math.nan}
    data = [b.escape_t1 for b in (cert.forward, cert.backward)]
    if all(d is not None for d in data):
        vals = {"rho_t1": min(d["rho"] for d in data), "rhodot_t1": min(d["rhodot"] for d in data),
                "G_t1": min(d["G"] for d in data)}
    return vals


# -- simulate ----------------------------------------------------------------------------

def _trajectory_report(traj, mass, cons) -> list:
    entries = check_conservation(traj, mass, cons, scale="h")
    if traj.formulation == "mcgehee":
        entries += check_energy_relation(traj, mass, cons)
        entries += check_projection_bound(traj, mass, cons)
        entries += check_vprime(traj, mass, cons)
        entries += check_F(traj, mass, cons)
    else:
        entries += check_projection_bound(traj, mass, cons)
    return entries


def simulate(cfg: RunConfig, out: Path) -> dict:
    """Integrate one initial condition and write its samples and monitor report."""
    mass = cfg.mass
    sim = cfg.simulate
    meta = {"masses": list(cfg.masses), "K": cfg.K}
    if sim.initial == "section":
        r0, r1 = section_radii(cfg)
        shape = cfg.section.shape or sample_shapes(1, mass, seed=cfg.seed, family=cfg.verify.family,
                                                   eps_range=cfg.verify.eps_range)[0]
        run = run_section(cfg, shape, cfg.section.theta, r0, r1)
        meta.update(h=cfg.h, omega=cfg.omega, r0=r0, r1=r1, theta=cfg.section.theta)
        report = []
        for name, branch, rev in (("forward", run.forward, False), ("backward", run.backward, True)):
            write_table(out / f"trajectory_{name}.csv", TRAJECTORY_SCHEMA, {**meta, "branch": name},
                        SAMPLE_COLUMNS, _table_rows(branch_table(branch, cfg, rev)))
        for b in (run.certificate.forward, run.certificate.backward):
            report.append({"branch": b.direction, "check": "run", "reason": b.reason, "steps": b.steps})
            report += [{"branch": b.direction, **e.as_dict()} for e in b.entries]
        write_jsonl(out / "report.jsonl", report)
        return {"reason": [run.forward.reason, run.backward.reason]}

    if sim.initial == "lagrange":
        state, period = lagrange_equilateral(mass)
        span_t = sim.periods * period
        meta["period"] = period
    else:
        v = sim.state
        state = JacobiState(np.array(v[:4], dtype=float), np.array(v[4:], dtype=float), 0.0)
        span_t = sim.span
    rep = conserved(state, mass)
    cons = ConservedPair(rep.h, rep.omega)
    meta.update(h=cons.h, omega=cons.omega, formulation=sim.formulation)
    start = state
    span = span_t
    if sim.formulation == "mcgehee":
        start = blowup(state, mass)
        # constant only on relative equilibria; otherwise the span is read in tau
        span = span_t / start.r**1.5 if sim.initial == "lagrange" else span_t
    stop = [EventSpec("pairwise-distance-below", 0.0, "falling", "stop", "collision")]
    traj = integrate(sim.formulation, start, mass, stop, cfg.integrator.build(), span=span, grid_dx=sim.grid_dx)
    tab = sample_table(traj, mass, cons)
    write_table(out / "trajectory.csv", TRAJECTORY_SCHEMA, meta, SAMPLE_COLUMNS, _table_rows(tab))
    report = [{"check": "run", "reason": traj.reason, **traj.stats}]
    report += [e.as_dict() for e in _trajectory_report(traj, mass, cons)]
    write_jsonl(out / "report.jsonl", report)
    return {"reason": traj.reason}


# -- verify --------------------------------------------------------------------------------

def verify_attempts(cfg: RunConfig):
    """Section states tried by ``verify``, in order: (shape index, shape, theta)."""
    if cfg.section.shape is not None:
        return [(0, np.asarray(cfg.section.shape, dtype=float), cfg.section.theta)]
    v = cfg.verify
    shapes = sample_shapes(v.max_shapes, cfg.mass, v.min_separation, cfg.seed, v.family, v.eps_range)
    return [(i, s, th) for i, s in enumerate(shapes) for th in v.thetas]


def verify(cfg: RunConfig, out: Path) -> tuple[str, dict]:
    """Search section states until one certifies; returns (outcome, certificate dict).

    Outcome is ``certified``, ``uncertified``, ``infeasible`` (no feasible
    section state) or ``singular``.
    """
    r0, r1 = section_radii(cfg)
    attempts = []
    found: SectionRun | None = None
    last: SectionRun | None = None
    for i, shape, theta in verify_attempts(cfg):
        try:
            run = run_section(cfg, shape, theta, r0, r1)
        except (InfeasibleSectionError, SingularStateError) as exc:
            attempts.append({"shape_index": i, "theta": theta, "classification": _classify(None, exc)})
            continue
        cls = _classify(run)
        attempts.append({"shape_index": i, "theta": theta, "classification": cls,
                         "U_min": run.certificate.U_min})
        log.info("shape %d theta %.4f: %s (U_min %.4g)", i, theta, cls, run.certificate.U_min)
        last = run
        if cls == "certified":
            found = run
            break
        if any(r.startswith("near-phase bound") for r in run.certificate.reasons):
            break
    chosen = found or last
    if chosen is None:
        kinds = {a["classification"] for a in attempts}
        outcome = "infeasible" if kinds == {"infeasible"} else "singular"
        doc = {"verdict": False, "K": cfg.K, "r0": r0, "r1": r1, "reasons": [f"no usable section state ({outcome})"],
               "attempts": attempts}
        write_json(out / "certificate.json", doc)
        return outcome, doc
    doc = chosen.certificate.as_dict()
    doc.update(shape=[float(x) for x in chosen.spec.shape], theta=chosen.spec.theta, attempts=attempts)
    write_json(out / "certificate.json", doc)
    for name, branch, rev in (("forward", chosen.forward, False), ("backward", chosen.backward, True)):
        tab = branch_table(branch, cfg, rev)
        n = len(tab["t"])
        idx = _downsample_index(n, cfg.verify.csv_max_rows, must=[int(np.argmin(tab["U"]))])
        meta = {"masses": list(cfg.masses), "h": cfg.h, "omega": cfg.omega, "K": cfg.K, "r0": r0, "r1": r1,
                "branch": name, "rows_total": n}
        write_table(out / f"trajectory_{name}.csv", TRAJECTORY_SCHEMA, meta, SAMPLE_COLUMNS, _table_rows(tab, idx))
    report = []
    for b in (chosen.certificate.forward, chosen.certificate.backward):
        report += [{"branch": b.direction, **e.as_dict()} for e in b.entries]
    write_jsonl(out / "report.jsonl", report)
    return ("certified" if found else "uncertified"), doc


# -- scan ----------------------------------------------------------------------------------

def scan_jobs(cfg: RunConfig) -> list[tuple]:
    """(index, r0, r1, shape index, shape, theta) for every initial condition of the scan."""
    sc = cfg.scan
    radii = sc.r0 or [section_radii(cfg)[0]]
    shapes = sample_shapes(sc.n_shapes, cfg.mass, sc.min_separation, cfg.seed, sc.family, sc.eps_range)
    jobs = []
    for r0 in radii:
        r1 = cfg.omega**2 / (2 * math.sqrt(r0))
        for i, s in enumerate(shapes):
            for th in sc.thetas:
                jobs.append((len(jobs), r0, r1, i, s, th))
    return jobs


def scan_one(cfg: RunConfig, job: tuple, with_entries: bool = False) -> dict:
    """Classify one initial condition; never raises for numerical outcomes."""
    index, r0, r1, i, shape, theta = job
    rec = {"index": index, "r0": r0, "r1": r1, "shape_index": i,
           "binary_ratio": float(pair_distances(shape, cfg.mass)[0]), "theta": theta,
           "U_min": math.nan, "rho_t1": math.nan, "rhodot_t1": math.nan, "G_t1": math.nan, "steps": 0}
    try:
        run = run_section(cfg, shape, theta, r0, r1, full=with_entries)
    except (InfeasibleSectionError, SingularStateError) as exc:
        rec.update(classification=_classify(None, exc), reason=type(exc).__name__)
        return rec
    cert = run.certificate
    rec.update(classification=_classify(run), U_min=cert.U_min, steps=cert.forward.steps + cert.backward.steps,
               reason=cert.reasons[0] if cert.reasons else "", **_escape_summary(cert))
    if with_entries:
        rec["entries"] = {b.direction: [e.as_dict() for e in b.entries] for b in (cert.forward, cert.backward)}
        rec["_run"] = run
    return rec


def _scan_worker(args):
    cfg, job = args
    return scan_one(cfg, job)


def run_scan(cfg: RunConfig, workers: int | None = None) -> list[dict]:
    """Scan records in job order, computed in parallel when ``workers`` > 1."""
    jobs = scan_jobs(cfg)
    workers = workers or cfg.worker_count
    if workers <= 1 or len(jobs) <= 1:
        return [scan_one(cfg, job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_scan_worker, [(cfg, job) for job in jobs], chunksize=1))


def scan_summary(records: list[dict]) -> dict:
    per_r0: dict = {}
    for rec in records:
        d = per_r0.setdefault(repr(rec["r0"]), dict.fromkeys(CLASSIFICATIONS, 0))
        d[rec["classification"]] += 1
    out = []
    for key, counts in per_r0.items():
        total = sum(counts.values())
        out.append({"r0": float(key), "runs": total, "certified_fraction": counts["certified"] / total, **counts})
    return {"schema": SCAN_SCHEMA, "by_r0": out}


def scan(cfg: RunConfig, out: Path, workers: int | None = None) -> list[dict]:
    records = run_scan(cfg, workers)
    write_table(out / "scan.csv", SCAN_SCHEMA, {"seed": cfg.seed, "K": cfg.K}, SCAN_COLUMNS,
                ([rec[c] for c in SCAN_COLUMNS] for rec in records))
    write_json(out / "scan_summary.json", scan_summary(records))
    return records


# -- export --------------------------------------------------------------------------------

def export_file(path: Path, out: Path, max_points: int, K: float) -> Path:
    """Plot-ready t, U, K, r, F series from a trajectory or export file.

    Rows are thinned to at most ``max_points`` on a uniform index lattice that
    always keeps the row of minimal U; exporting an export is the identity.
    """
    path = Path(path)
    schema, meta, columns, data = read_table(path)
    if schema not in (TRAJECTORY_SCHEMA, EXPORT_SCHEMA):
        raise ParseError(path, 1, f"unsupported schema {schema!r}")
    missing = [c for c in ("t", "U", "r", "F") if c not in columns]
    if missing:
        raise ParseError(path, 2, f"missing columns {missing}")
    col = {c: data[:, columns.index(c)] for c in columns}
    if schema == EXPORT_SCHEMA:
        K = float(col["K"][0])
    else:
        K = float(meta.get("K", K))
    n = len(col["t"])
    idx = _downsample_index(n, max_points, must=[int(np.nanargmin(col["U"]))])
    stem = path.name[:-len(".csv")] if path.name.endswith(".csv") else path.name
    if not stem.endswith(".export"):
        stem += ".export"
    target = out / f"{stem}.csv"
    rows = ([col["t"][i], col["U"][i], K, col["r"][i], col["F"][i]] for i in idx)
    write_table(target, EXPORT_SCHEMA, {"K": K}, EXPORT_COLUMNS, rows)
    return target
