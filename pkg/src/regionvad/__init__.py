"""Spatial-context video anomaly detection by region discovery."""
from regionvad.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
