"""Cognition-aware egocentric forecasting: trajectory, head motion and perceived uncertainty."""
__version__ = "0.1.0"
