"""Time the compiled kernels against the NumPy fallback.

    python benchmarks/bench_kernels.py [--envs 30] [--vehicles 9] [--steps 2000]

Both backends run the same step loop (gaps, IDM, wrapper, integration) on
identical inputs; the final states are compared before timings are printed.
"""
import argparse
import time

import numpy as np

from wavesmooth import kernels
from wavesmooth.core import IdmParams
from wavesmooth.dynamics import equilibrium_gap


def run(mod, envs, vehicles, steps, seed=0):
    p = IdmParams()
    rng = np.random.default_rng(seed)
    dt, L = 0.1, 5.0
    v0 = rng.uniform(20.0, 28.0, envs)
    s = np.array([equilibrium_gap(p, v) for v in v0])
    x = -(np.arange(vehicles)[None, :] * (s + L)[:, None])
    v = np.repeat(v0[:, None], vehicles, axis=1)
    t = np.arange(steps + 1) * dt
    lead_v = np.clip(v0[None, :] - 4.0 * np.sin(2 * np.pi * t[:, None] / 60.0) ** 2, 0, 35)
    lead_x = x[:, 0][None, :] + np.concatenate((np.zeros((1, envs)),
                                                np.cumsum(0.5 * (lead_v[1:] + lead_v[:-1]) * dt, axis=0)))
    av = 1
    raw = rng.uniform(-0.5, 0.5, envs)
    gaps, acc, a_eff = np.empty_like(x), np.zeros_like(x), np.empty_like(x)
    mask = np.ones(x.shape, dtype=bool)
    mask[:, 0] = False
    applied, h_min, h_max = np.empty(envs), np.empty(envs), np.empty(envs)
    branch = np.empty(envs, dtype=np.int_)
    t0 = time.perf_counter()
    for k in range(steps):
        mod.compute_gaps(x, L, gaps)
        mod.idm_fill(v, gaps, mask, p.v0, p.T, p.s0, p.a_max, p.b, p.delta, -3.0, acc)
        mod.wrap(raw, np.ascontiguousarray(v[:, av]), np.ascontiguousarray(v[:, av - 1]),
                 np.ascontiguousarray(gaps[:, av]), dt, -3.0, 1.5, 0.0, 35.0, applied, branch, h_min, h_max)
        acc[:, av] = applied
        mod.advance(x, v, acc, lead_x[k + 1], lead_v[k + 1], dt, 0.0, 35.0, L, a_eff)
    return time.perf_counter() - t0, x, v


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--envs", type=int, default=30)
    ap.add_argument("--vehicles", type=int, default=9)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    py = kernels.backend("python")
    try:
        cy = kernels.backend("cython")
    except ImportError:
        cy = None
    t_py, x_py, v_py = run(py, args.envs, args.vehicles, args.steps)
    print(f"python  {t_py:8.3f} s  ({1e6 * t_py / args.steps:7.1f} us/step)")
    if cy is None:
        print("cython  not built (pip install -e . --no-build-isolation)")
        return
    t_cy, x_cy, v_cy = run(cy, args.envs, args.vehicles, args.steps)
    print(f"cython  {t_cy:8.3f} s  ({1e6 * t_cy / args.steps:7.1f} us/step)")
    print(f"speedup {t_py / t_cy:6.2f}x  max |dx| {np.abs(x_py - x_cy).max():.2e}  "
          f"max |dv| {np.abs(v_py - v_cy).max():.2e}")


if __name__ == "__main__":
    main()
