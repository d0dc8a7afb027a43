"""Calibration-aware training strategies, calibration metrics and an
experiment harness for a small fully-connected VAE-classifier."""

__version__ = "0.1.0"
