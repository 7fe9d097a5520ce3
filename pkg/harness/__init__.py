"""Experiment harness: config, estimator registry, runs, search and reports."""

__version__ = "0.1.0"
