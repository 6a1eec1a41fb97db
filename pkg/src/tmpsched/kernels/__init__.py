"""Hot kernels: compiled extension when built, numpy fallback otherwise.

Set ``TMPSCHED_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback
from ._fallback import DeadlockError

BACKEND = "python"
fifo_times = _fallback.fifo_times
chain_dp = _fallback.chain_dp

if not os.environ.get("TMPSCHED_PURE_PYTHON"):
    try:
        from . import _native
    except ImportError:
        _native = None
    else:
        fifo_times = _native.fifo_times
        chain_dp = _native.chain_dp
        BACKEND = "cython"

__all__ = ["BACKEND", "DeadlockError", "chain_dp", "fifo_times"]
