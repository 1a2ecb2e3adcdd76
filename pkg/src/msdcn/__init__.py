"""Multi-scale dilated convolution network for long-horizon forecasting."""

__version__ = "0.1.0"
