"""Bimodal encoders with guide calibration and displacement fusion, built on
a small numpy reverse-mode autodiff engine."""
__version__ = "0.1.0"
