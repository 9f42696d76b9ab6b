"""Backend selection for the hot loops.

The Cython extension ``endosr._ckernels`` is used when it was built; otherwise
the numpy versions in ``endosr._pykernels`` are used. Set ``ENDOSR_PURE_PYTHON=1``
to force the fallback (the benchmark and the backend-parity tests do this).
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("ENDOSR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

correlate_valid = _impl.correlate_valid
resample_rows = _impl.resample_rows
signed_rank_tail_counts = _impl.signed_rank_tail_counts

__all__ = ["BACKEND", "correlate_valid", "resample_rows", "signed_rank_tail_counts"]
