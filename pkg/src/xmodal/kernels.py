"""Hot-kernel dispatch: compiled extension if importable, else pure Python.

Set ``XMODAL_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

try:
    if os.environ.get("XMODAL_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-Python backend requested")
    from . import _kernels as _impl
    BACKEND = "compiled"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

sinkhorn_log = _impl.sinkhorn_log
transport_simplex = _impl.transport_simplex
markov_sample = _impl.markov_sample


def backends():
    """Available kernel modules keyed by name (for tests and benchmarks)."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
