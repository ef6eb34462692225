"""Long-context pre-training and word decoding for multi-channel time series."""

__version__ = "0.1.0"
