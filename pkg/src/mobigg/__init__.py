"""Dynamic Boolean model: Poisson nodes moving as Brownian motions, connected within distance r."""

__version__ = "0.1.0"
