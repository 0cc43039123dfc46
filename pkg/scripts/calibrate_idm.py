"""Find the IDM a_max that places the string-stability boundary at a target speed.

    python scripts/calibrate_idm.py [--target 18.0] [--lo 0.5] [--hi 1.8]

Other IDM parameters come from the defaults. The boundary falls
monotonically as a_max grows, so a bisection on a_max is enough; past about
a_max = 1.9 the model is stable at every speed and there is no boundary.
"""
import argparse
from dataclasses import replace

from wavesmooth.core import IdmParams
from wavesmooth.dynamics import perturbation_amplitudes, stability_boundary


def boundary(a_max):
    return stability_boundary(replace(IdmParams(), a_max=a_max))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target", type=float, default=18.0)
    ap.add_argument("--lo", type=float, default=0.5)
    ap.add_argument("--hi", type=float, default=1.8)
    args = ap.parse_args()
    lo, hi = args.lo, args.hi
    if not boundary(hi) < args.target < boundary(lo):
        raise SystemExit(f"target {args.target} not bracketed by a_max in [{lo}, {hi}]")
    while hi - lo > 1e-4:
        mid = 0.5 * (lo + hi)
        if boundary(mid) > args.target:
            lo = mid
        else:
            hi = mid
    a = 0.5 * (lo + hi)
    print(f"a_max={a:.4f} boundary={boundary(a):.4f} m/s")
    cur = IdmParams()
    print(f"default a_max={cur.a_max} boundary={boundary(cur.a_max):.4f} m/s")
    for v in (10.0, 14.0, 22.0, 25.0):
        amp = perturbation_amplitudes(cur, v)
        print(f"  v={v:4.1f} amplitude ratio vehicle 20 / vehicle 2 = {amp[-1] / amp[2]:.3f}")


if __name__ == "__main__":
    main()
