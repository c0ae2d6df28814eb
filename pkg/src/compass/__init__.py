"""Partitioning compiler for crossbar processing-in-memory accelerators."""

__version__ = "0.1.0"
