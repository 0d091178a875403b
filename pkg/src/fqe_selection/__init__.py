"""Hyperparameter selection for fitted Q-evaluation."""

__version__ = '0.1.0'
