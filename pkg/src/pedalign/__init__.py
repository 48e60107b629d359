"""Pedagogical alignment from tutor-response preferences."""

__version__ = "0.1.0"
