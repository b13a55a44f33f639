"""Position-debiased click prediction at desk scale.

Subpackages: ``tensor`` (autodiff engine), ``optim`` (Adam + parameters),
``checkpoint`` (manifest/blob persistence), ``synthgen`` (biased click-log
generator), ``encoders`` (news/behavior encoders), ``model`` (twin click
towers + discriminator), ``training`` (sampling and the unified loop),
``evaluation`` (ranking metrics, protocol, IPW/PAL pieces), ``cli``.
"""

import os as _os

# Desk-scale GEMMs are too small for multithreaded BLAS to pay for its
# synchronization, and single-threaded kernels keep every run bitwise
# reproducible. Only takes effect if numpy is not imported yet.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
