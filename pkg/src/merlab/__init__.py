"""Continual learning with meta-experience replay: learners, benchmarks and metrics."""

__version__ = "0.1.0"
