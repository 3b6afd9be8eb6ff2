"""Roadway-capacity-driven graph convolution network for traffic forecasting."""

__version__ = "0.1.0"
