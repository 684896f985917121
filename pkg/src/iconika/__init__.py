"""Iconicity toolkit: indicators, ranking predictors, rank statistics, and
annotation-campaign tooling for image datasets."""

__version__ = "0.1.0"
