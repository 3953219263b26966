"""4D shifted-window transformer for volumetric time series, with its own autodiff core."""

__version__ = "0.1.0"
