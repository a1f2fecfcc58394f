"""Monte Carlo lab for non-intersecting subcritical FK clusters and their watermelon limits."""

__version__ = "0.1.0"
