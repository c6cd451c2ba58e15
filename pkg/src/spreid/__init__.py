"""Semantic-parsing-guided person re-identification at desk scale (numpy only)."""

import os as _os

# SPREID_THREADS caps BLAS/OpenMP worker threads; it must be applied before
# numpy is first imported to take effect.
_threads = _os.environ.get("SPREID_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
