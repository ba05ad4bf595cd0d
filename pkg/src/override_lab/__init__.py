"""Capability-aware preference learning from clinician override records."""

__version__ = "0.1.0"
