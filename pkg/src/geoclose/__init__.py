"""Numerical closing of geodesic orbits by conformal C^1-small perturbations."""
