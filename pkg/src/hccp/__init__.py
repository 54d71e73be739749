"""Hybrid-sample, consistency-aware pre-ranking on a simulated cascade."""

__version__ = "0.1.0"
