# cython: language_level=3
"""Compiled per-step platoon kernels; same contract as ``_pykernels``."""
from libc.math cimport sqrt, pow, INFINITY

FAILSAFE, GAP_CLOSE, PASS_THROUGH = 0, 1, 2


def compute_gaps(double[:, ::1] x, double length, double[:, ::1] out):
    cdef Py_ssize_t r, i
    for r in range(x.shape[0]):
        out[r, 0] = INFINITY
        for i in range(1, x.shape[1]):
            out[r, i] = (x[r, i - 1] - x[r, i]) - length
    return out.base


def idm_fill(double[:, ::1] v, double[:, ::1] gaps, mask, double v0, double T, double s0,
             double a_max, double b, double delta, double a_lo, double[:, ::1] out):
    cdef unsigned char[:, ::1] m = mask.view("u1") if mask.dtype == bool else mask
    cdef Py_ssize_t r, i
    cdef double vf, vl, s_star, dyn, acc, ratio
    cdef double root = 2.0 * sqrt(a_max * b)
    for r in range(v.shape[0]):
        for i in range(1, v.shape[1]):
            if not m[r, i]:
                continue
            vf = v[r, i]
            vl = v[r, i - 1]
            dyn = vf * T + vf * (vf - vl) / root
            s_star = s0 + (dyn if dyn > 0.0 else 0.0)
            ratio = s_star / gaps[r, i]
            acc = a_max * (1.0 - pow(vf / v0, delta) - ratio * ratio)
            if acc < a_lo:
                acc = a_lo
            elif acc > a_max:
                acc = a_max
            out[r, i] = acc
    return out.base


def wrap(double[::1] raw, double[::1] v_av, double[::1] v_lead, double[::1] h, double dt,
         double a_lo, double a_hi, double v_lo, double v_hi, double[::1] applied,
         long[::1] branch, double[::1] h_min, double[::1] h_max):
    import numpy as np
    cdef Py_ssize_t k, n = raw.shape[0]
    ttc_arr = np.empty(n)
    cdef double[::1] ttc = ttc_arr
    cdef double v_diff, a_out, lo, hi, hm
    for k in range(n):
        v_diff = v_av[k] + 4.0 * v_av[k] / 30.0 + 1.0 - v_lead[k]
        if v_diff > 0.0:
            ttc[k] = h[k] / v_diff
            h_min[k] = 6.0 * v_diff
        else:
            ttc[k] = INFINITY
            h_min[k] = 0.0
        hm = 6.0 * v_av[k]
        h_max[k] = hm if hm > 120.0 else 120.0
        # ttc <= 6 multiplied through by 30 v_diff, free of the division's rounding
        if 30.0 * h[k] <= 6.0 * (34.0 * v_av[k] + 30.0 - 30.0 * v_lead[k]):
            branch[k] = 0
            a_out = a_lo
        elif h[k] >= h_max[k]:
            branch[k] = 1
            a_out = a_hi
        else:
            branch[k] = 2
            a_out = raw[k]
        lo = (v_lo - v_av[k]) / dt
        hi = (v_hi - v_av[k]) / dt
        if a_out < lo:
            a_out = lo
        if a_out > hi:
            a_out = hi
        applied[k] = a_out
    return ttc_arr


def advance(double[:, ::1] x, double[:, ::1] v, double[:, ::1] a, double[::1] x_lead_next,
            double[::1] v_lead_next, double dt, double v_lo, double v_hi, double length,
            double[:, ::1] a_eff):
    cdef Py_ssize_t r, i, best_r = -1, best_c = -1
    cdef double vn, g, best = INFINITY
    for r in range(x.shape[0]):
        vn = v_lead_next[r]
        a_eff[r, 0] = (vn - v[r, 0]) / dt
        v[r, 0] = vn
        x[r, 0] = x_lead_next[r]
        for i in range(1, x.shape[1]):
            vn = v[r, i] + a[r, i] * dt
            if vn < v_lo:
                vn = v_lo
            elif vn > v_hi:
                vn = v_hi
            a_eff[r, i] = (vn - v[r, i]) / dt
            v[r, i] = vn
            x[r, i] = x[r, i] + vn * dt
            g = (x[r, i - 1] - x[r, i]) - length
            if g < best:
                best = g
                best_r = r
                best_c = i
    return best, best_r, best_c
