"""Backend selection for the per-step kernels.

The compiled extension is used when it has been built; otherwise the NumPy
implementation is loaded. Set ``WAVESMOOTH_PURE_PYTHON=1`` to force the
fallback.
"""
import os

from wavesmooth import _pykernels

if os.environ.get("WAVESMOOTH_PURE_PYTHON"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from wavesmooth import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

FAILSAFE, GAP_CLOSE, PASS_THROUGH = 0, 1, 2
BRANCH_NAMES = {FAILSAFE: "Failsafe", GAP_CLOSE: "GapClose", PASS_THROUGH: "PassThrough"}

compute_gaps = _impl.compute_gaps
idm_fill = _impl.idm_fill
wrap = _impl.wrap
advance = _impl.advance


def backend(name):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from wavesmooth import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
