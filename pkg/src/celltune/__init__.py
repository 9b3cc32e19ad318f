"""Few-shot domain adaptation for cellular instance segmentation."""

__version__ = "0.1.0"

from ._kernels import backend_name  # noqa: F401
