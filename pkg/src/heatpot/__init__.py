"""Heat potentials on adaptive quadtrees."""

__version__ = "0.1.0"
