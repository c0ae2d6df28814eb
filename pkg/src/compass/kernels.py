"""Kernel selection: compiled extension when built, pure Python otherwise.

Set ``COMPASS_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("COMPASS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

ffd_feasible = _impl.ffd_feasible
validity_frontier = _impl.validity_frontier
allocate_replication = _impl.allocate_replication
stage_ns = _impl.stage_ns


def backends() -> dict:
    """All importable kernel modules keyed by name (used by tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels as compiled
    except ImportError:
        return out
    out["cython"] = compiled
    return out
