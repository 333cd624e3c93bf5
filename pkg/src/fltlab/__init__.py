"""Desk-scale federated learning threat lab."""

__version__ = "0.1.0"
