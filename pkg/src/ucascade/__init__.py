"""Two-stage Bayesian nodule detection: MC-dropout U-Net segmentation feeding
3D MC-dropout detectors and a convex-combination ensemble, all in numpy."""

from .errors import ConfigError, DataError, NumericalError, UcascadeError

__version__ = "0.1.0"
__all__ = ["ConfigError", "DataError", "NumericalError", "UcascadeError", "__version__"]
