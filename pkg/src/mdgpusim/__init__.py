"""Deterministic simulation of GPU-offloaded MD step execution on multi-GPU nodes."""

__version__ = "0.1.0"
