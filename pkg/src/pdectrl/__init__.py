"""Boundary control of unstable 1D PDEs with backstepping, DeepONet imitation and SAC."""

__version__ = "0.1.0"
