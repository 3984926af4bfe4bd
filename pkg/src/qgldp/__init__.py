"""Two-layer stochastic quasi-geostrophic model with large-deviation tooling."""

__version__ = "0.1.0"
