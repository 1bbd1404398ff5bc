"""Sandbox task genesis, experience-driven policy evolution and grid navigation."""

__version__ = "0.1.0"
