"""Manifold integrated gradients: geodesic path attributions on a learned data manifold."""

__version__ = "0.1.0"
