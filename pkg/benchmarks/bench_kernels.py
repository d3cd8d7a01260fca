"""Compiled vs pure-Python stepping kernels on the two workloads that matter.

Run: python3 benchmarks/bench_kernels.py [--steps N]

Both backends integrate the same initial conditions with the same tolerances
for a fixed number of accepted steps; the table shows wall time per step and
the largest relative state difference after 50 steps.  The two backends sum
the embedded error estimate in different orders, and that estimate cancels
heavily, so step sizes drift apart at the 1e-7 level; the difference is
therefore tolerance-sized rather than round-off, and grows on the unstable
Lagrange orbit if the run is long.
"""
from __future__ import annotations

import argparse
import math
import time

import numpy as np

from tribody import _pystep, kernels
from tribody.dynamics import ConservedPair, blowup, derive_mass_constants, lagrange_equilateral
from tribody.section import SectionSpec, build_section_state, sample_shapes, theorem_r0


def workloads():
    mass = derive_mass_constants(1.0, 1.0, 1.0)
    lag, _ = lagrange_equilateral(mass)
    cons = ConservedPair(-1.0, 0.5)
    r0, _ = theorem_r0(3.0, cons)
    sec = build_section_state(SectionSpec(r0, sample_shapes(1, mass)[0], 0.0, cons), mass)
    return mass, [
        ("lagrange, t-mode", kernels.MODE_JACOBI, lag.as_array()),
        ("lagrange, tau-mode", kernels.MODE_MCGEHEE, blowup(lag, mass).as_array()),
        ("near collision, tau-mode", kernels.MODE_MCGEHEE, sec.as_array()),
    ]


def run(module, mode, params, y0, steps):
    st = module.Stepper(mode, params, 0.0, y0, 1e-10, 1e-12)
    st.set_events([], [], [])
    out_x, out_y = np.empty(steps + 2), np.empty((steps + 2, len(y0)))
    gx, gy = np.empty(1), np.empty((1, len(y0)))
    t0 = time.perf_counter()
    st.run(math.inf, steps, steps + 1, out_x, out_y, gx, gy)
    return time.perf_counter() - t0, st.naccept, np.asarray(st.y)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    if kernels.BACKEND != "compiled":
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    mass, cases = workloads()
    params = mass.params()
    print(f"{'workload':<26}{'compiled us/step':>18}{'python us/step':>16}{'speedup':>9}{'rel diff':>10}")
    for name, mode, y0 in cases:
        tc, nc, _ = run(kernels, mode, params, y0, args.steps)
        tp, npy, _ = run(_pystep, mode, params, y0, args.steps)
        _, _, yc = run(kernels, mode, params, y0, 50)
        _, _, yp = run(_pystep, mode, params, y0, 50)
        diff = np.abs(yc - yp).max() / np.abs(yc).max()
        print(f"{name:<26}{1e6 * tc / nc:>18.2f}{1e6 * tp / npy:>16.1f}{tp / tc:>9.0f}{diff:>10.1e}")


if __name__ == "__main__":
    main()
