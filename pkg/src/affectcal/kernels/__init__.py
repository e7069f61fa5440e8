"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built; set
``AFFECTCAL_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
active one.
"""

import os

from . import _pykernels as python_backend

try:
    if os.environ.get("AFFECTCAL_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure python requested")
    from . import _ckernels as compiled_backend
except ImportError:
    compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

macro_from_counts = _impl.macro_from_counts
confusion_matrix = _impl.confusion_matrix
bias_sweep = _impl.bias_sweep
# numpy's vectorised comparisons beat the scalar loop here (see benchmarks/)
threshold_sweep = python_backend.threshold_sweep
window_mean = _impl.window_mean
scatter_mean = _impl.scatter_mean

__all__ = [
    "BACKEND",
    "bias_sweep",
    "compiled_backend",
    "confusion_matrix",
    "macro_from_counts",
    "python_backend",
    "scatter_mean",
    "threshold_sweep",
    "window_mean",
]
