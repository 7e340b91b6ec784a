"""Ergodic BSDEs driven by finite-state continuous-time Markov chains."""

__version__ = "0.1.0"
