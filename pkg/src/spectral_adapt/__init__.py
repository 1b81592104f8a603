"""Spectral-adaptive multi-head graph filters for node anomaly detection."""

import os

# Cap BLAS/OpenMP worker threads before numpy loads its backend.
_threads = os.environ.get("SPECTRAL_ADAPT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

__version__ = "0.1.0"
