"""Operator-splitting neural timesteppers for semi-explicit index-1 DAEs."""

__version__ = "0.1.0"
