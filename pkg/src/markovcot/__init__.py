"""Markovian chain-of-thought training at desk scale."""

__version__ = "0.1.0"
