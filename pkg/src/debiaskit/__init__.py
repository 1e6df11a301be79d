"""Desk-scale harness for propensity-weighted dataset-bias mitigation."""

__version__ = "0.1.0"
