"""Workbench for finding and fixing spurious attributions in time-series classifiers."""

__version__ = "0.1.0"
