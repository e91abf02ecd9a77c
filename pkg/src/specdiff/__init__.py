"""Photon counting statistics of a driven two-level emitter under spectral diffusion."""
from .bloch import CountingPoint, SystemParams
from .noise import OunParams, RtnParams, XiGrid

__version__ = "0.1.0"

__all__ = ["CountingPoint", "SystemParams", "OunParams", "RtnParams", "XiGrid", "__version__"]
