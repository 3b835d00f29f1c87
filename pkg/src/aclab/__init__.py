"""Asymmetric actor-critic lab: SAC with independently sized actors and critics,
twin-critic aggregation variants, critic regularizers, and overfitting /
underestimation diagnostics on built-in continuous-control environments.
"""

import os

# Runs are single-threaded by contract (bit-identical replays, process-level
# study parallelism). Pin BLAS threads before numpy is first imported.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
