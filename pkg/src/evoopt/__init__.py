"""Evolutionary search over small programs for VM placement and ADMM penalty tuning."""

__version__ = "0.1.0"
