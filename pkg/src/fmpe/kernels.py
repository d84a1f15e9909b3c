"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built and imports cleanly;
otherwise the numpy fallback is used. Set ``FMPE_PURE_PYTHON=1`` to force the
fallback. Both backends expose ``gelu``, ``sigmoid`` and ``rbf_pair_sum``.
"""

import os

from fmpe import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FMPE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fmpe import _ckernels as _impl  # noqa: F811
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py

gelu = _impl.gelu
# scipy's expit is already a compiled ufunc and beats the Cython loop (see benchmarks/)
sigmoid = _kernels_py.sigmoid
rbf_pair_sum = _impl.rbf_pair_sum


def available_backends():
    """Map of backend name to module, for cross-checks and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from fmpe import _ckernels
        out["compiled"] = _ckernels
    except ImportError:
        pass
    return out
