"""Finite-N simulation and mean-field analysis of Markov decision evolutionary games."""

__version__ = "0.1.0"
