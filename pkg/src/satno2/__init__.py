"""Surface NO2 estimation from Sentinel-2 imagery and Sentinel-5P column densities."""

from .estimator import NO2Regressor
from .metrics import Metrics, mae, mse, r2

__all__ = ["NO2Regressor", "Metrics", "mae", "mse", "r2"]
__version__ = "0.1.0"
