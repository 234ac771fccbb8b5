"""Joint domain translation and stereo matching for unsupervised
synthetic-to-real disparity estimation."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
