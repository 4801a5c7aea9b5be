"""Rigid cylinder driven through a collisionless gas: memory force, dynamics and Monte Carlo."""

__version__ = "0.1.0"
