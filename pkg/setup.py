import numpy as np
from setuptools import Extension, setup

# -ffp-contract=off: the numpy fallback and the pure-python reference
# integrator must produce bit-identical floats, so FMA contraction is
# disabled. No -ffast-math for the same reason.
extensions = [
    Extension(
        "celltune._kernels._native",
        sources=["src/celltune/_kernels/_native.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(extensions, language_level="3")
except ImportError:
    # No Cython available: install pure-python; the kernel package falls
    # back to the numpy implementation at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
