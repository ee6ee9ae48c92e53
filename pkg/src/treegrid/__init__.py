"""Failure mitigation for DC power networks with tree-connected control areas."""

__version__ = "0.1.0"
