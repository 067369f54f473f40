"""Temporal action localization with a multi-scale transformer and segment recurrence."""

__version__ = "0.1.0"
