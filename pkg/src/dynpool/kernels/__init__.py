"""Hot pooling kernels with a compiled (numba) and a pure-numpy path.

Set DYNPOOL_NO_NUMBA=1 to force the numpy path; otherwise the numba path is
used when numba imports cleanly. Both paths produce bitwise-identical output.
"""

import os

from .pool_numpy import ceil_div

_flag = os.environ.get("DYNPOOL_NO_NUMBA", "").strip().lower()
if _flag in ("1", "true", "yes"):
    BACKEND = "numpy"
else:
    try:
        from . import pool_numba  # noqa: F401
        BACKEND = "numba"
    except ImportError:
        BACKEND = "numpy"

if BACKEND == "numba":
    from .pool_numba import maxpool_grid_backward, maxpool_grid_forward
else:
    from .pool_numpy import maxpool_grid_backward, maxpool_grid_forward

__all__ = ["BACKEND", "ceil_div", "maxpool_grid_forward", "maxpool_grid_backward"]
