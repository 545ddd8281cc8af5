"""Simulator and autonomic orchestration for a data center built from salvaged devices."""

__version__ = "0.1.0"
