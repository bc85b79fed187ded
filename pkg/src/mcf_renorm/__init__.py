"""Lattice-flow continued fractions and the renormalization schemes built on them."""

__version__ = "0.1.0"
