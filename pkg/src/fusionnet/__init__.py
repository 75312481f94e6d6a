"""Fusion of a residual CNN and a multi-axis attention transformer for
binary chest X-ray classification, built on a small numpy autodiff core.

``FUSIONNET_THREADS`` caps math-library worker threads; 0 (the default)
pins everything to one thread for bitwise-reproducible reference runs.
The clamp must happen before numpy loads its BLAS, hence before any
submodule import below.
"""

import os as _os


def _configure_threads() -> None:
    raw = _os.environ.get("FUSIONNET_THREADS", "0")
    try:
        n = max(int(raw), 0)
    except ValueError:
        n = 0
    limit = str(n if n > 0 else 1)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(var, limit)


_configure_threads()

from .errors import (  # noqa: E402
    CheckpointError,
    ConfigurationError,
    DimensionError,
    FusionNetError,
    InversionError,
    TrainingError,
    ValidationError,
)
from .tensor import (  # noqa: E402
    GradTape,
    RngState,
    Tensor,
    backward,
    concat,
    conv2d,
    cross_entropy,
    flatten,
    matmul,
    reshape,
    softmax,
    using_dtype,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DimensionError",
    "FusionNetError",
    "GradTape",
    "InversionError",
    "RngState",
    "Tensor",
    "TrainingError",
    "ValidationError",
    "backward",
    "concat",
    "conv2d",
    "cross_entropy",
    "flatten",
    "matmul",
    "reshape",
    "softmax",
    "using_dtype",
]
