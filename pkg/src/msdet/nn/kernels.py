"""Kernel backend dispatch.

The MSDET_BACKEND environment variable selects the implementation:

    auto   (default) use numba if importable, else fall back to pure numpy
    numba  require the numba backend, fail loudly if unavailable
    numpy  force the pure-numpy reference kernels

Both backends implement identical semantics; `msdet.nn.kernels.BACKEND`
reports which one is active.  benchmarks/bench_kernels.py times them
side by side.
"""

import os

from ..errors import ConfigError

_requested = os.environ.get("MSDET_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"MSDET_BACKEND must be one of auto/numba/numpy, got {_requested!r}"
    )

if _requested in ("auto", "numba"):
    try:
        from . import kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import kernels_numpy as _impl
        BACKEND = "numpy"
else:
    from . import kernels_numpy as _impl
    BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
roi_max_pool_forward = _impl.roi_max_pool_forward
roi_max_pool_backward = _impl.roi_max_pool_backward
