"""Backend selection for the likelihood kernels.

The compiled extension is used when importable; set ``QMETRO_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("QMETRO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

two_photon_probs = _impl.two_photon_probs
outcome_moments = _impl.outcome_moments

__all__ = ["BACKEND", "two_photon_probs", "outcome_moments"]
