"""Random Ferns classification of polarimetric SAR covariance images."""

__version__ = "0.1.0"
