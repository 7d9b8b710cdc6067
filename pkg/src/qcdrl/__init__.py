"""Bayesian quickest change detection: simulators, asymptotic
approximations, and reinforcement-learning trainers."""

__version__ = "0.1.0"
