"""Pin BLAS to one thread before numpy loads anywhere.

The acceptance runtime bounds are stated for a single CPU core, and
single-threaded BLAS also keeps timings stable.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
