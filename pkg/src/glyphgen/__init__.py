"""Desk-scale generative pipeline on synthetic shape glyphs.

Pipeline stages: pretrain a small classifier (the frozen semantic teacher),
train a semantically-aligned autoencoder in two stages, train a position-query
autoregressive backbone with a flow-matching head over its latents, then
sample and evaluate. Everything runs single-threaded on numpy.
"""

import os as _os

# Pin BLAS to one thread before numpy loads: the performance budget is one
# core and fixed threading removes a run-to-run variance source. setdefault
# only, so explicit user settings win.
for _k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
           "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_k, "1")

from . import autodiff  # noqa: E402  (env pinning must precede numpy import)

__version__ = "0.1.0"
__all__ = ["autodiff", "__version__"]
