"""Hot numeric kernels with two interchangeable backends.

The convolution and pooling inner loops dominate training time. They exist
twice: a numba @njit backend (default) and a pure-numpy backend built on
im2col plus BLAS. Both satisfy the same contracts and agree to floating
point reassociation error; tests compare them directly.

Selection is an environment flag read once at import:

    SEFER_KERNELS=numba   force numba (error if numba is unavailable)
    SEFER_KERNELS=numpy   force the pure-numpy fallback
    unset                 numba when importable, numpy otherwise

`python -m sefer.bench` benchmarks the two backends against each other.
"""

import os

from ..errors import ConfigError
from . import numpy_backend

_ENV_VAR = "SEFER_KERNELS"


def _select_backend():
    choice = os.environ.get(_ENV_VAR, "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ConfigError(f"{_ENV_VAR} must be 'numba' or 'numpy', got {choice!r}")
    if choice == "numpy":
        return numpy_backend, "numpy"
    try:
        from . import numba_backend
    except ImportError:
        if choice == "numba":
            raise ConfigError(f"{_ENV_VAR}=numba but numba is not importable")
        return numpy_backend, "numpy"
    return numba_backend, "numba"


_impl, BACKEND = _select_backend()


def use_backend(name: str) -> str:
    """Rebind the exported kernels to a named backend at runtime.

    The env flag covers normal use; this hook exists for the benchmark and
    the backend-equivalence tests, which need both implementations in one
    process. Returns the previously active backend name.
    """
    global _impl, BACKEND
    if name == "numpy":
        impl = numpy_backend
    elif name == "numba":
        try:
            from . import numba_backend as impl
        except ImportError:
            raise ConfigError("numba backend requested but numba is not "
                              "importable")
    else:
        raise ConfigError(f"unknown kernel backend {name!r}")
    previous = BACKEND
    _impl, BACKEND = impl, name
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(impl, fn)
    return previous


_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward_dx",
    "conv2d_backward_dw",
    "maxpool2d_forward",
    "maxpool2d_backward",
)

conv2d_forward = _impl.conv2d_forward
conv2d_backward_dx = _impl.conv2d_backward_dx
conv2d_backward_dw = _impl.conv2d_backward_dw
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward

__all__ = [
    "BACKEND",
    "use_backend",
    "conv2d_forward",
    "conv2d_backward_dx",
    "conv2d_backward_dw",
    "maxpool2d_forward",
    "maxpool2d_backward",
]
