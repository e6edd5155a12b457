"""Desk-scale maze navigation benchmark.

Procedural block mazes, a first-person POMDP simulator with a software
raycaster, a from-scratch reverse-mode autodiff core, a two-LSTM
actor-critic agent trained asynchronously with auxiliary depth and
loop-closure tasks, and metrics that separate goal *finding* from goal
*exploitation*.
"""

import os as _os

# Desk-scale tensors are tiny; multi-threaded BLAS only adds sync overhead
# and can perturb reduction order. Pin to one thread before numpy loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
