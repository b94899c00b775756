"""Cross-instance reconstruction for domain-generalisable action features."""

import os

if os.environ.get("CIR_DETERMINISTIC") == "1":
    # must happen before numpy loads its BLAS
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
