"""Sizing and placement of community and distributed energy storage on
unbalanced three-phase LV feeders."""

__version__ = "0.1.0"
