"""Kernel backend selection.

The compiled extension is preferred; the numpy implementation is a
drop-in replacement producing bit-identical results. Set
``CELLTUNE_KERNELS=numpy`` to force the fallback.
"""

import os

from . import _numpy as numpy_backend

BACKEND = "numpy"
heat_diffusion = numpy_backend.heat_diffusion
follow_field = numpy_backend.follow_field
im2col3 = numpy_backend.im2col3

if os.environ.get("CELLTUNE_KERNELS", "").lower() != "numpy":
    try:
        from . import _native as native_backend

        BACKEND = "native"
        heat_diffusion = native_backend.heat_diffusion
        follow_field = native_backend.follow_field
        im2col3 = native_backend.im2col3
    except ImportError:
        pass


def backend_name():
    """Name of the active kernel backend ("native" or "numpy")."""
    return BACKEND
