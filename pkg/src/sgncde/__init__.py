"""Continuous-time SO(3) forecasting with Savitzky-Golay neural CDEs."""

__version__ = "0.1.0"
