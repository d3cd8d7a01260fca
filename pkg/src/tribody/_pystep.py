"""Pure-Python DOP853 stepper (fallback for the compiled ``_cstep`` kernel).

Both backends expose the same surface: ``rhs``, ``event_value`` and the
``Stepper`` class.  The stepper owns one integration: it advances until the end
of the span, an event sign change, a full output buffer, or a failure, and then
hands control back to the Python driver in :mod:`tribody.integrator`.
"""
import math

import numpy as np

from . import _tableau as tab

MODE_JACOBI = 0
MODE_MCGEHEE = 1

EV_V = 0
EV_R = 1
EV_RHO = 2
EV_PAIR = 3
EV_TIME = 4

STATUS_END = 0
STATUS_EVENT = 1
STATUS_FULL = 2
STATUS_UNDERFLOW = 3
STATUS_BUDGET = 4
STATUS_SINGULAR = 5

SINGULAR_RATIO = 1e-12
SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0

_NS = tab.N_STAGES
_A = tab.A[:_NS, :_NS]
_B = tab.B
_C = tab.C[:_NS]
_E3 = tab.E3
_E5 = tab.E5
_D = tab.D
_A_EXTRA = tab.A[_NS + 1:]
_C_EXTRA = tab.C[_NS + 1:]


def _accel(m1, m2, m3, nu1, nu2, ax, ay, bx, by):
    """Plain gradient of U at configuration (a, b) plus the min pair distance."""
    d13x = bx + nu2 * ax
    d13y = by + nu2 * ay
    d23x = bx - nu1 * ax
    d23y = by - nu1 * ay
    r12 = math.sqrt(ax * ax + ay * ay)
    r13 = math.sqrt(d13x * d13x + d13y * d13y)
    r23 = math.sqrt(d23x * d23x + d23y * d23y)
    dmin = min(r12, r13, r23)
    if dmin == 0.0:
        return None, 0.0
    c12 = m1 * m2 / (r12 * r12 * r12)
    c13 = m1 * m3 / (r13 * r13 * r13)
    c23 = m2 * m3 / (r23 * r23 * r23)
    g = (
        -c12 * ax - nu2 * c13 * d13x + nu1 * c23 * d23x,
        -c12 * ay - nu2 * c13 * d13y + nu1 * c23 * d23y,
        -c13 * d13x - c23 * d23x,
        -c13 * d13y - c23 * d23y,
    )
    return g, dmin


def rhs(mode, params, y):
    """Return ``(dy, singular)`` for the Jacobi (t) or McGehee (tau) system."""
    m1, m2, m3, mu1, mu2, nu1, nu2 = (float(p) for p in params)
    y = [float(v) for v in y]
    if mode == MODE_JACOBI:
        g, dmin = _accel(m1, m2, m3, nu1, nu2, y[0], y[1], y[2], y[3])
        if g is None:
            return np.full(8, np.nan), True
        size = math.sqrt(mu1 * (y[0] ** 2 + y[1] ** 2) + mu2 * (y[2] ** 2 + y[3] ** 2))
        dy = np.array([y[4], y[5], y[6], y[7], g[0] / mu1, g[1] / mu1, g[2] / mu2, g[3] / mu2])
        return dy, dmin < SINGULAR_RATIO * size
    r = y[0]
    s0, s1, s2, s3 = y[1:5]
    z0, z1, z2, z3 = y[5:9]
    g, dmin = _accel(m1, m2, m3, nu1, nu2, s0, s1, s2, s3)
    if g is None or r <= 0.0:
        return np.full(10, np.nan), True
    v = mu1 * (s0 * z0 + s1 * z1) + mu2 * (s2 * z2 + s3 * z3)
    hv = 0.5 * v
    dy = np.array([
        v * r,
        z0 - v * s0, z1 - v * s1, z2 - v * s2, z3 - v * s3,
        g[0] / mu1 + hv * z0, g[1] / mu1 + hv * z1, g[2] / mu2 + hv * z2, g[3] / mu2 + hv * z3,
        r * math.sqrt(r),
    ])
    return dy, dmin < SINGULAR_RATIO


def event_value(mode, params, kind, level, x, y):
    """Event function at independent variable ``x`` and state ``y``.

    Sizes are physical in both modes; the time event compares physical time
    (``x`` itself in t-mode, the accumulated clock in tau-mode).
    """
    mu1, mu2, nu1, nu2 = (float(p) for p in params[3:7])
    if mode == MODE_JACOBI:
        scale = 1.0
        c, cd = y[0:4], y[4:8]
        t = x
    else:
        scale = float(y[0])
        c, cd = y[1:5], y[5:9]
        t = float(y[9])
    if kind == EV_V:
        return mu1 * (c[0] * cd[0] + c[1] * cd[1]) + mu2 * (c[2] * cd[2] + c[3] * cd[3])
    if kind == EV_R:
        return scale * math.sqrt(mu1 * (c[0] ** 2 + c[1] ** 2) + mu2 * (c[2] ** 2 + c[3] ** 2)) - level
    if kind == EV_RHO:
        return scale * math.hypot(c[2], c[3]) - level
    if kind == EV_PAIR:
        r12 = math.hypot(c[0], c[1])
        r13 = math.hypot(c[2] + nu2 * c[0], c[3] + nu2 * c[1])
        r23 = math.hypot(c[2] - nu1 * c[0], c[3] - nu1 * c[1])
        return scale * min(r12, r13, r23) - level
    if kind == EV_TIME:
        return t - level
    raise ValueError(f"unknown event kind {kind}")


def _rms_norm(a):
    return float(np.sqrt(np.mean(a * a)))


class Stepper:
    """Adaptive DOP853 integration of one trajectory in increasing ``x``."""

    compiled = False

    def __init__(self, mode, params, x0, y0, rtol, atol, first_step=0.0, max_step=math.inf, min_step=0.0):
        self.mode = int(mode)
        self.params = np.ascontiguousarray(params, dtype=float)
        self.n = 8 if self.mode == MODE_JACOBI else 10
        self.x = float(x0)
        self.y = np.array(y0, dtype=float)
        self.rtol = float(rtol)
        self.atol = float(atol)
        self.max_step = float(max_step)
        self.min_step = float(min_step)
        self.K = np.zeros((tab.N_STAGES_EXTENDED, self.n))
        self.x_old = self.x
        self.y_old = self.y.copy()
        self.f_old = None
        self.h_prev = 0.0
        self.naccept = 0
        self.nreject = 0
        self.nfev = 0
        self.ev_kinds = np.zeros(0, dtype=np.int64)
        self.ev_levels = np.zeros(0)
        self.ev_dirs = np.zeros(0, dtype=np.int64)
        self.ev_prev = np.zeros(0)
        self.ev_hit = np.zeros(0, dtype=np.int64)
        self.grid_dx = 0.0
        self.grid_start = 0.0
        self.grid_index = 0
        self.grid_need = 0
        self.f, singular = self._fun(self.y)
        if singular:
            raise ValueError("initial state is singular")
        self.h_abs = float(first_step) if first_step > 0 else self._initial_step()

    def _fun(self, y):
        self.nfev += 1
        return rhs(self.mode, self.params, y)

    def _initial_step(self):
        scale = self.atol + np.abs(self.y) * self.rtol
        d0 = _rms_norm(self.y / scale)
        d1 = _rms_norm(self.f / scale)
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        f1, _ = self._fun(self.y + h0 * self.f)
        d2 = _rms_norm((f1 - self.f) / scale) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** (1.0 / 8.0)
        return min(100 * h0, h1, self.max_step)

    def set_events(self, kinds, levels, dirs):
        self.ev_kinds = np.asarray(kinds, dtype=np.int64)
        self.ev_levels = np.asarray(levels, dtype=float)
        self.ev_dirs = np.asarray(dirs, dtype=np.int64)
        self.ev_hit = np.zeros(len(self.ev_kinds), dtype=np.int64)
        self.ev_prev = self._event_values(self.x, self.y)

    def set_grid(self, start, dx):
        self.grid_start = float(start)
        self.grid_dx = float(dx)
        self.grid_index = 0

    def _event_values(self, x, y):
        return np.array([
            event_value(self.mode, self.params, k, lv, x, y) for k, lv in zip(self.ev_kinds, self.ev_levels)
        ])

    def _project(self, y):
        if self.mode == MODE_MCGEHEE:
            mu1, mu2 = self.params[3], self.params[4]
            nrm = math.sqrt(mu1 * (y[1] ** 2 + y[2] ** 2) + mu2 * (y[3] ** 2 + y[4] ** 2))
            y[1:5] /= nrm

    def _attempt(self, h):
        K = self.K
        K[0] = self.f
        for s in range(1, _NS):
            dy = np.dot(K[:s].T, _A[s, :s]) * h
            K[s], singular = self._fun(self.y + dy)
            if singular:
                return None, None, True
        y_new = self.y + h * np.dot(K[:_NS].T, _B)
        f_new, singular = self._fun(y_new)
        K[_NS] = f_new
        return y_new, f_new, singular

    def _error_norm(self, h, y_new):
        scale = self.atol + np.maximum(np.abs(self.y), np.abs(y_new)) * self.rtol
        K = self.K[:_NS + 1]
        err5 = np.dot(K.T, _E5) / scale
        err3 = np.dot(K.T, _E3) / scale
        e5 = float(np.dot(err5, err5))
        e3 = float(np.dot(err3, err3))
        if e5 == 0.0 and e3 == 0.0:
            return 0.0
        return abs(h) * e5 / math.sqrt((e5 + 0.01 * e3) * self.n)

    def dense(self):
        """Interpolant coefficients (7, n) for the last accepted step."""
        K = self.K
        h = self.h_prev
        for s in range(_NS + 1, tab.N_STAGES_EXTENDED):
            dy = np.dot(K[:s].T, _A_EXTRA[s - _NS - 1, :s]) * h
            K[s], _ = self._fun(self.y_old + dy)
        F = np.empty((tab.INTERPOLATOR_POWER, self.n))
        dy = self.y - self.y_old
        F[0] = dy
        F[1] = h * self.f_old - dy
        F[2] = 2 * dy - h * (self.f + self.f_old)
        F[3:] = h * np.dot(_D, K)
        return F

    def run(self, x_end, max_steps, stride, out_x, out_y, grid_x, grid_y):
        """Advance toward ``x_end``; returns ``(status, n_out, n_grid)``."""
        n_out = 0
        n_grid = 0
        cap_out = len(out_x)
        cap_grid = len(grid_x)
        steps = 0
        while True:
            if self.x >= x_end:
                return STATUS_END, n_out, n_grid
            if steps >= max_steps:
                return STATUS_BUDGET, n_out, n_grid
            if n_out >= cap_out:
                return STATUS_FULL, n_out, n_grid
            if self.grid_dx > 0:
                need = int(min(self.h_abs, x_end - self.x) / self.grid_dx) + 2
                if cap_grid - n_grid < need:
                    self.grid_need = need
                    return STATUS_FULL, n_out, n_grid
            min_step = max(self.min_step, 10 * abs(math.nextafter(self.x, math.inf) - self.x))
            h_abs = min(self.h_abs, self.max_step)
            rejected = False
            while True:
                if h_abs < min_step:
                    return STATUS_UNDERFLOW, n_out, n_grid
                h = h_abs
                x_new = self.x + h
                if x_new > x_end:
                    x_new = x_end
                h = x_new - self.x
                h_abs = h
                y_new, f_new, singular = self._attempt(h)
                if singular:
                    # shrink toward the singularity; a persistent failure underflows
                    h_abs *= MIN_FACTOR
                    rejected = True
                    self.nreject += 1
                    if h_abs < min_step:
                        return STATUS_SINGULAR, n_out, n_grid
                    continue
                err = self._error_norm(h, y_new)
                if err < 1.0:
                    factor = MAX_FACTOR if err == 0.0 else min(MAX_FACTOR, SAFETY * err ** (-1.0 / 8.0))
                    if rejected:
                        factor = min(1.0, factor)
                    self.h_abs = h_abs * factor
                    break
                h_abs *= max(MIN_FACTOR, SAFETY * err ** (-1.0 / 8.0))
                rejected = True
                self.nreject += 1
            self._project(y_new)
            self.x_old, self.y_old, self.f_old = self.x, self.y, self.f
            self.x, self.y, self.f = x_new, y_new, f_new
            self.h_prev = h
            self.naccept += 1
            steps += 1

            if self.grid_dx > 0:
                F = None
                while True:
                    xg = self.grid_start + self.grid_index * self.grid_dx
                    if xg > self.x:
                        break
                    if xg >= self.x_old:
                        if F is None:
                            F = self.dense()
                        grid_x[n_grid] = xg
                        grid_y[n_grid] = dense_eval(F, self.y_old, (xg - self.x_old) / h)
                        n_grid += 1
                    self.grid_index += 1

            hit = False
            if len(self.ev_kinds):
                new = self._event_values(self.x, self.y)
                for i in range(len(new)):
                    a, b = self.ev_prev[i], new[i]
                    d = self.ev_dirs[i]
                    rising = a < 0.0 <= b
                    falling = a > 0.0 >= b
                    flag = (rising and d >= 0) or (falling and d <= 0)
                    self.ev_hit[i] = flag
                    hit = hit or flag
                self.ev_prev = new
            if hit or self.naccept % stride == 0 or self.x >= x_end:
                out_x[n_out] = self.x
                out_y[n_out] = self.y
                n_out += 1
            if hit:
                return STATUS_EVENT, n_out, n_grid


def dense_eval(F, y_old, theta):
    """Evaluate the DOP853 interpolant at fraction ``theta`` of the step."""
    y = np.zeros_like(y_old)
    for i, f in enumerate(F[::-1]):
        y += f
        y *= theta if i % 2 == 0 else 1.0 - theta
    return y + y_old
