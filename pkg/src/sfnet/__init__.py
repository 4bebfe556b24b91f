"""Spatial and frequency dual-domain real/fake image detector."""

from sfnet.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
