"""Decentralized traffic forecasting from differentially private label proportions."""

__version__ = "0.1.0"
