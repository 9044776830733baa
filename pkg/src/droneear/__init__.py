"""drone-ear: acoustic UAV detection, DOA, and classification toolkit."""

__version__ = "0.1.0"

from .kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
