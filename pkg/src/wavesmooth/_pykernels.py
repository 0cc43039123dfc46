"""Pure NumPy implementation of the per-step platoon kernels.

Arrays are float64 with shape (batch, vehicles); column 0 is the trajectory
leader and column ``i`` follows column ``i - 1``. ``_ckernels.pyx`` mirrors
this module function by function.
"""
import numpy as np

FAILSAFE, GAP_CLOSE, PASS_THROUGH = 0, 1, 2


def compute_gaps(x, length, out):
    out[:, 0] = np.inf
    np.subtract(x[:, :-1], x[:, 1:], out=out[:, 1:])
    out[:, 1:] -= length
    return out


def idm_fill(v, gaps, mask, v0, T, s0, a_max, b, delta, a_lo, out):
    """Write clipped IDM accelerations into ``out`` where ``mask`` is set."""
    vf = v[:, 1:]
    vl = v[:, :-1]
    s = gaps[:, 1:]
    s_star = s0 + np.maximum(0.0, vf * T + vf * (vf - vl) / (2.0 * np.sqrt(a_max * b)))
    acc = a_max * (1.0 - (vf / v0) ** delta - (s_star / s) ** 2)
    np.clip(acc, a_lo, a_max, out=acc)
    m = mask[:, 1:]
    out[:, 1:][m] = acc[m]
    return out


def wrap(raw, v_av, v_lead, h, dt, a_lo, a_hi, v_lo, v_hi, applied, branch, h_min, h_max):
    """Gap-closing and failsafe wrappers plus the speed-bound clip (1-D arrays)."""
    v_diff = v_av + 4.0 * v_av / 30.0 + 1.0 - v_lead
    closing = v_diff > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ttc = np.where(closing, h / np.where(closing, v_diff, 1.0), np.inf)
    h_min[:] = np.where(closing, 6.0 * v_diff, 0.0)
    h_max[:] = np.maximum(120.0, 6.0 * v_av)
    # ttc <= 6 multiplied through by 30 v_diff, free of the division's rounding
    fail = 30.0 * h <= 6.0 * (34.0 * v_av + 30.0 - 30.0 * v_lead)
    close = ~fail & (h >= h_max)
    branch[:] = PASS_THROUGH
    branch[close] = GAP_CLOSE
    branch[fail] = FAILSAFE
    a_out = np.where(fail, a_lo, np.where(close, a_hi, raw))
    applied[:] = np.minimum(np.maximum(a_out, (v_lo - v_av) / dt), (v_hi - v_av) / dt)
    return ttc


def advance(x, v, a, x_lead_next, v_lead_next, dt, v_lo, v_hi, length, a_eff):
    """Semi-implicit Euler for followers; leader set from replay.

    Returns ``(min_gap, row, col)`` over follower gaps after the update.
    """
    v_old = v.copy()
    vn = np.clip(v[:, 1:] + a[:, 1:] * dt, v_lo, v_hi)
    v[:, 1:] = vn
    x[:, 1:] += vn * dt
    x[:, 0] = x_lead_next
    v[:, 0] = v_lead_next
    np.subtract(v, v_old, out=a_eff)
    a_eff /= dt
    if x.shape[1] < 2:
        return np.inf, -1, -1
    g = x[:, :-1] - x[:, 1:] - length
    k = int(np.argmin(g))
    r, c = divmod(k, g.shape[1])
    return float(g[r, c]), r, c + 1
