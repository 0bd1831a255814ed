"""Ambient-environment optimization for AR: deterministic scene simulator,
image-based characterization, IoT control policies, and an edge service."""

__version__ = "0.1.0"
