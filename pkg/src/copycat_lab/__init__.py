"""Desk-scale imitation-learning lab for studying previous-action copying."""

__version__ = "0.1.0"
