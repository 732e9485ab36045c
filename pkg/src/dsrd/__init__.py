"""Dual-scale retentive dynamics for event-stream graphs."""

__version__ = "0.1.0"
