"""Simulation lab for Bayesian inference, self-test and fault mitigation in compute-in-memory networks."""

__version__ = "0.1.0"
