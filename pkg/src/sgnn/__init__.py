"""Learned rigid-scene simulation with symmetry restricted to the subgroup
of orthogonal maps fixing the gravity direction."""

__version__ = "0.1.0"
