# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled DOP853 stepper; same surface as :mod:`tribody._pystep`."""
from libc.math cimport sqrt, fabs, fmin, fmax, pow, hypot, nextafter, INFINITY, NAN

import numpy as np
cimport numpy as cnp

from . import _tableau as tab

cnp.import_array()

cdef enum:
    NS = 12
    NSX = 16
    NMAX = 10
    NPOW = 7

cdef enum:
    STATUS_END_C = 0
    STATUS_EVENT_C = 1
    STATUS_FULL_C = 2
    STATUS_UNDERFLOW_C = 3
    STATUS_BUDGET_C = 4
    STATUS_SINGULAR_C = 5

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

cdef double SINGULAR_RATIO = 1e-12
cdef double SAFETY = 0.9
cdef double MIN_FACTOR = 0.2
cdef double MAX_FACTOR = 10.0

cdef double TA[NSX][NSX]
cdef double TB[NS]
cdef double TE3[NS + 1]
cdef double TE5[NS + 1]
cdef double TD[4][NSX]


def _load_tableau():
    cdef int i, j
    for i in range(NSX):
        for j in range(NSX):
            TA[i][j] = tab.A[i, j]
    for i in range(NS):
        TB[i] = tab.B[i]
    for i in range(NS + 1):
        TE3[i] = tab.E3[i]
        TE5[i] = tab.E5[i]
    for i in range(4):
        for j in range(NSX):
            TD[i][j] = tab.D[i, j]


_load_tableau()


cdef struct Params:
    double m1, m2, m3, mu1, mu2, nu1, nu2


cdef inline int _rhs(int mode, Params* p, const double* y, double* dy) noexcept nogil:
    """Fill dy; return 1 if the state is singular."""
    cdef double ax, ay, bx, by, d13x, d13y, d23x, d23y, r12, r13, r23, dmin
    cdef double c12, c13, c23, g0, g1, g2, g3, r, v, hv, size
    cdef int off = 0 if mode == 0 else 1
    ax = y[off]
    ay = y[off + 1]
    bx = y[off + 2]
    by = y[off + 3]
    d13x = bx + p.nu2 * ax
    d13y = by + p.nu2 * ay
    d23x = bx - p.nu1 * ax
    d23y = by - p.nu1 * ay
    r12 = sqrt(ax * ax + ay * ay)
    r13 = sqrt(d13x * d13x + d13y * d13y)
    r23 = sqrt(d23x * d23x + d23y * d23y)
    dmin = fmin(r12, fmin(r13, r23))
    if dmin == 0.0:
        return 1
    c12 = p.m1 * p.m2 / (r12 * r12 * r12)
    c13 = p.m1 * p.m3 / (r13 * r13 * r13)
    c23 = p.m2 * p.m3 / (r23 * r23 * r23)
    g0 = -c12 * ax - p.nu2 * c13 * d13x + p.nu1 * c23 * d23x
    g1 = -c12 * ay - p.nu2 * c13 * d13y + p.nu1 * c23 * d23y
    g2 = -c13 * d13x - c23 * d23x
    g3 = -c13 * d13y - c23 * d23y
    if mode == 0:
        dy[0] = y[4]
        dy[1] = y[5]
        dy[2] = y[6]
        dy[3] = y[7]
        dy[4] = g0 / p.mu1
        dy[5] = g1 / p.mu1
        dy[6] = g2 / p.mu2
        dy[7] = g3 / p.mu2
        size = sqrt(p.mu1 * (ax * ax + ay * ay) + p.mu2 * (bx * bx + by * by))
        return 1 if dmin < SINGULAR_RATIO * size else 0
    r = y[0]
    if r <= 0.0:
        return 1
    v = p.mu1 * (y[1] * y[5] + y[2] * y[6]) + p.mu2 * (y[3] * y[7] + y[4] * y[8])
    hv = 0.5 * v
    dy[0] = v * r
    dy[1] = y[5] - v * y[1]
    dy[2] = y[6] - v * y[2]
    dy[3] = y[7] - v * y[3]
    dy[4] = y[8] - v * y[4]
    dy[5] = g0 / p.mu1 + hv * y[5]
    dy[6] = g1 / p.mu1 + hv * y[6]
    dy[7] = g2 / p.mu2 + hv * y[7]
    dy[8] = g3 / p.mu2 + hv * y[8]
    dy[9] = r * sqrt(r)
    return 1 if dmin < SINGULAR_RATIO else 0


cdef inline double _event(int mode, Params* p, long kind, double level, double x, const double* y) noexcept nogil:
    cdef double scale, t
    cdef const double* c
    cdef const double* cd
    if mode == 0:
        scale = 1.0
        c = y
        cd = y + 4
        t = x
    else:
        scale = y[0]
        c = y + 1
        cd = y + 5
        t = y[9]
    if kind == 0:
        return p.mu1 * (c[0] * cd[0] + c[1] * cd[1]) + p.mu2 * (c[2] * cd[2] + c[3] * cd[3])
    if kind == 1:
        return scale * sqrt(p.mu1 * (c[0] * c[0] + c[1] * c[1]) + p.mu2 * (c[2] * c[2] + c[3] * c[3])) - level
    if kind == 2:
        return scale * hypot(c[2], c[3]) - level
    if kind == 3:
        return scale * fmin(hypot(c[0], c[1]), fmin(hypot(c[2] + p.nu2 * c[0], c[3] + p.nu2 * c[1]),
                                                     hypot(c[2] - p.nu1 * c[0], c[3] - p.nu1 * c[1]))) - level
    return t - level


cdef Params _params(object params):
    cdef Params p
    p.m1 = params[0]
    p.m2 = params[1]
    p.m3 = params[2]
    p.mu1 = params[3]
    p.mu2 = params[4]
    p.nu1 = params[5]
    p.nu2 = params[6]
    return p


def rhs(int mode, params, y):
    cdef Params p = _params(params)
    cdef int n = 8 if mode == 0 else 10
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    out = np.empty(n)
    cdef double[::1] ov = out
    cdef int singular = _rhs(mode, &p, &yv[0], &ov[0])
    if singular and not np.all(np.isfinite(out)):
        out[:] = np.nan
    return out, bool(singular)


def event_value(int mode, params, long kind, double level, double x, y):
    cdef Params p = _params(params)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    if kind < 0 or kind > 4:
        raise ValueError(f"unknown event kind {kind}")
    return _event(mode, &p, kind, level, x, &yv[0])


def dense_eval(F, y_old, double theta):
    y = np.zeros_like(y_old)
    for i, f in enumerate(F[::-1]):
        y += f
        y *= theta if i % 2 == 0 else 1.0 - theta
    return y + y_old


cdef class Stepper:
    cdef public int mode, n
    cdef Params p
    cdef public object params
    cdef public double x, x_old, h_abs, h_prev, rtol, atol, max_step, min_step
    cdef public double grid_start, grid_dx
    cdef public long grid_index, grid_need
    cdef public long naccept, nreject, nfev
    cdef double yb[NMAX]
    cdef double yold[NMAX]
    cdef double fb[NMAX]
    cdef double fold[NMAX]
    cdef double ynew[NMAX]
    cdef double fnew[NMAX]
    cdef double tmp[NMAX]
    cdef double K[NSX][NMAX]
    cdef long[::1] ev_kinds
    cdef double[::1] ev_levels
    cdef long[::1] ev_dirs
    cdef double[::1] ev_prev
    cdef public object ev_hit
    cdef int n_ev

    compiled = True

    def __init__(self, int mode, params, double x0, y0, double rtol, double atol,
                 double first_step=0.0, double max_step=INFINITY, double min_step=0.0):
        cdef int i
        self.mode = mode
        self.n = 8 if mode == 0 else 10
        self.params = np.ascontiguousarray(params, dtype=np.float64)
        self.p = _params(self.params)
        self.x = x0
        self.x_old = x0
        y0 = np.ascontiguousarray(y0, dtype=np.float64)
        for i in range(self.n):
            self.yb[i] = y0[i]
            self.yold[i] = y0[i]
        self.rtol = rtol
        self.atol = atol
        self.max_step = max_step
        self.min_step = min_step
        self.naccept = 0
        self.nreject = 0
        self.nfev = 0
        self.h_prev = 0.0
        self.grid_dx = 0.0
        self.grid_start = 0.0
        self.grid_index = 0
        self.grid_need = 0
        self.set_events(np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0, dtype=np.int64))
        if self._fun(self.yb, self.fb):
            raise ValueError("initial state is singular")
        self.h_abs = first_step if first_step > 0 else self._initial_step()

    cdef int _fun(self, const double* y, double* dy) noexcept nogil:
        self.nfev += 1
        return _rhs(self.mode, &self.p, y, dy)

    cdef double _initial_step(self):
        cdef int i
        cdef double sc, d0 = 0, d1 = 0, d2 = 0, h0, h1
        cdef double f1[NMAX]
        for i in range(self.n):
            sc = self.atol + fabs(self.yb[i]) * self.rtol
            d0 += (self.yb[i] / sc) ** 2
            d1 += (self.fb[i] / sc) ** 2
        d0 = sqrt(d0 / self.n)
        d1 = sqrt(d1 / self.n)
        h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        for i in range(self.n):
            self.tmp[i] = self.yb[i] + h0 * self.fb[i]
        self._fun(self.tmp, f1)
        for i in range(self.n):
            sc = self.atol + fabs(self.yb[i]) * self.rtol
            d2 += ((f1[i] - self.fb[i]) / sc) ** 2
        d2 = sqrt(d2 / self.n) / h0
        if d1 <= 1e-15 and d2 <= 1e-15:
            h1 = fmax(1e-6, h0 * 1e-3)
        else:
            h1 = pow(0.01 / fmax(d1, d2), 1.0 / 8.0)
        return fmin(fmin(100 * h0, h1), self.max_step)

    @property
    def y(self):
        return np.array([self.yb[i] for i in range(self.n)])

    @property
    def y_old(self):
        return np.array([self.yold[i] for i in range(self.n)])

    def set_events(self, kinds, levels, dirs):
        self.ev_kinds = np.ascontiguousarray(kinds, dtype=np.int64)
        self.ev_levels = np.ascontiguousarray(levels, dtype=np.float64)
        self.ev_dirs = np.ascontiguousarray(dirs, dtype=np.int64)
        self.n_ev = len(self.ev_kinds)
        self.ev_prev = np.zeros(self.n_ev)
        self.ev_hit = np.zeros(self.n_ev, dtype=np.int64)
        cdef int i
        for i in range(self.n_ev):
            self.ev_prev[i] = _event(self.mode, &self.p, self.ev_kinds[i], self.ev_levels[i], self.x, self.yb)

    def set_grid(self, double start, double dx):
        self.grid_start = start
        self.grid_dx = dx
        self.grid_index = 0

    cdef int _attempt(self, double h) noexcept nogil:
        cdef int s, j, i
        cdef double acc
        for i in range(self.n):
            self.K[0][i] = self.fb[i]
        for s in range(1, NS):
            for i in range(self.n):
                acc = 0.0
                for j in range(s):
                    acc += self.K[j][i] * TA[s][j]
                self.tmp[i] = self.yb[i] + h * acc
            if self._fun(self.tmp, self.K[s]):
                return 1
        for i in range(self.n):
            acc = 0.0
            for j in range(NS):
                acc += self.K[j][i] * TB[j]
            self.ynew[i] = self.yb[i] + h * acc
        s = self._fun(self.ynew, self.fnew)
        for i in range(self.n):
            self.K[NS][i] = self.fnew[i]
        return s

    cdef double _error_norm(self, double h) noexcept nogil:
        cdef int i, j
        cdef double sc, a5, a3, e5 = 0.0, e3 = 0.0
        for i in range(self.n):
            sc = self.atol + fmax(fabs(self.yb[i]), fabs(self.ynew[i])) * self.rtol
            a5 = 0.0
            a3 = 0.0
            for j in range(NS + 1):
                a5 += self.K[j][i] * TE5[j]
                a3 += self.K[j][i] * TE3[j]
            e5 += (a5 / sc) ** 2
            e3 += (a3 / sc) ** 2
        if e5 == 0.0 and e3 == 0.0:
            return 0.0
        return fabs(h) * e5 / sqrt((e5 + 0.01 * e3) * self.n)

    cdef void _dense_coeffs(self, double[:, ::1] F) noexcept nogil:
        cdef int s, j, i
        cdef double acc, h = self.h_prev, dyi
        for s in range(NS + 1, NSX):
            for i in range(self.n):
                acc = 0.0
                for j in range(s):
                    acc += self.K[j][i] * TA[s][j]
                self.tmp[i] = self.yold[i] + h * acc
            self._fun(self.tmp, self.K[s])
        for i in range(self.n):
            dyi = self.yb[i] - self.yold[i]
            F[0, i] = dyi
            F[1, i] = h * self.fold[i] - dyi
            F[2, i] = 2 * dyi - h * (self.fb[i] + self.fold[i])
            for s in range(4):
                acc = 0.0
                for j in range(NSX):
                    acc += TD[s][j] * self.K[j][i]
                F[3 + s, i] = h * acc

    def dense(self):
        F = np.empty((NPOW, self.n))
        self._dense_coeffs(F)
        return F

    cdef void _dense_point(self, double[:, ::1] F, double theta, double* out) noexcept nogil:
        cdef int i, k
        cdef double acc
        for i in range(self.n):
            acc = 0.0
            for k in range(NPOW - 1, -1, -1):
                acc += F[k, i]
                if (NPOW - 1 - k) % 2 == 0:
                    acc *= theta
                else:
                    acc *= 1.0 - theta
            out[i] = acc + self.yold[i]

    def run(self, double x_end, long max_steps, long stride,
            double[::1] out_x, double[:, ::1] out_y, double[::1] grid_x, double[:, ::1] grid_y):
        cdef long n_out = 0, n_grid = 0, steps = 0, need
        cdef long cap_out = out_x.shape[0], cap_grid = grid_x.shape[0]
        cdef double min_step, h_abs, h, x_new, err, factor, nrm, xg, a, b
        cdef int rejected, singular, i, hit, flag, have_dense, return_status = -1
        cdef long d
        cdef double[:, ::1] F = np.empty((NPOW, self.n))
        cdef double[::1] ev_new = np.empty(max(self.n_ev, 1))
        cdef long[::1] ev_hit = self.ev_hit
        cdef double gpt[NMAX]
        with nogil:
            while True:
                if self.x >= x_end:
                    return_status = STATUS_END_C
                    break
                if steps >= max_steps:
                    return_status = STATUS_BUDGET_C
                    break
                if n_out >= cap_out:
                    return_status = STATUS_FULL_C
                    break
                if self.grid_dx > 0:
                    need = <long>(fmin(self.h_abs, x_end - self.x) / self.grid_dx) + 2
                    if cap_grid - n_grid < need:
                        self.grid_need = need
                        return_status = STATUS_FULL_C
                        break
                min_step = fmax(self.min_step, 10 * fabs(nextafter(self.x, INFINITY) - self.x))
                h_abs = fmin(self.h_abs, self.max_step)
                rejected = 0
                return_status = -1
                while True:
                    if h_abs < min_step:
                        return_status = STATUS_UNDERFLOW_C
                        break
                    x_new = self.x + h_abs
                    if x_new > x_end:
                        x_new = x_end
                    h = x_new - self.x
                    h_abs = h
                    singular = self._attempt(h)
                    if singular:
                        h_abs *= MIN_FACTOR
                        rejected = 1
                        self.nreject += 1
                        if h_abs < min_step:
                            return_status = STATUS_SINGULAR_C
                            break
                        continue
                    err = self._error_norm(h)
                    if err < 1.0:
                        if err == 0.0:
                            factor = MAX_FACTOR
                        else:
                            factor = fmin(MAX_FACTOR, SAFETY * pow(err, -1.0 / 8.0))
                        if rejected:
                            factor = fmin(1.0, factor)
                        self.h_abs = h_abs * factor
                        break
                    h_abs *= fmax(MIN_FACTOR, SAFETY * pow(err, -1.0 / 8.0))
                    rejected = 1
                    self.nreject += 1
                if return_status >= 0:
                    break
                if self.mode == 1:
                    nrm = sqrt(self.p.mu1 * (self.ynew[1] * self.ynew[1] + self.ynew[2] * self.ynew[2])
                               + self.p.mu2 * (self.ynew[3] * self.ynew[3] + self.ynew[4] * self.ynew[4]))
                    for i in range(1, 5):
                        self.ynew[i] /= nrm
                for i in range(self.n):
                    self.yold[i] = self.yb[i]
                    self.fold[i] = self.fb[i]
                    self.yb[i] = self.ynew[i]
                    self.fb[i] = self.fnew[i]
                self.x_old = self.x
                self.x = x_new
                self.h_prev = h
                self.naccept += 1
                steps += 1

                if self.grid_dx > 0:
                    have_dense = 0
                    while True:
                        xg = self.grid_start + self.grid_index * self.grid_dx
                        if xg > self.x:
                            break
                        if xg >= self.x_old:
                            if not have_dense:
                                self._dense_coeffs(F)
                                have_dense = 1
                            grid_x[n_grid] = xg
                            self._dense_point(F, (xg - self.x_old) / h, gpt)
                            for i in range(self.n):
                                grid_y[n_grid, i] = gpt[i]
                            n_grid += 1
                        self.grid_index += 1

                hit = 0
                for i in range(self.n_ev):
                    ev_new[i] = _event(self.mode, &self.p, self.ev_kinds[i], self.ev_levels[i], self.x, self.yb)
                    a = self.ev_prev[i]
                    b = ev_new[i]
                    d = self.ev_dirs[i]
                    flag = 0
                    if a < 0.0 and b >= 0.0 and d >= 0:
                        flag = 1
                    elif a > 0.0 and b <= 0.0 and d <= 0:
                        flag = 1
                    ev_hit[i] = flag
                    if flag:
                        hit = 1
                    self.ev_prev[i] = b
                if hit or self.naccept % stride == 0 or self.x >= x_end:
                    out_x[n_out] = self.x
                    for i in range(self.n):
                        out_y[n_out, i] = self.yb[i]
                    n_out += 1
                if hit:
                    return_status = STATUS_EVENT_C
                    break
        return return_status, n_out, n_grid

    # pure-Python mirror compatibility
    @property
    def f(self):
        return np.array([self.fb[i] for i in range(self.n)])

