"""Calibration-based dual prototypical contrastive learning at desk scale."""

import os as _os

# BLAS threading must be capped before numpy loads for bit-reproducible runs.
_threads = _os.environ.get("CDPCL_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
