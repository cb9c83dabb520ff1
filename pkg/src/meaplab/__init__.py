"""meaplab: a desk-scale training lab for masked next-token prediction.

Importing this package before numpy pins BLAS worker counts from the
MEAP_THREADS environment variable (default 1) so that repeated runs on the
same machine are bit-reproducible.
"""

import os as _os

_threads = _os.environ.get("MEAP_THREADS", "1")
for _var in (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from . import analysis, autodiff, corruption, data, model, training  # noqa: E402,F401
from .errors import MeapError  # noqa: E402,F401
