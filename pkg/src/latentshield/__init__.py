"""Constraint-parameterized latent safety filtering on a Dubins-car benchmark."""

__version__ = "0.1.0"
