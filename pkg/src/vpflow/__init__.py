"""VP probability-flow transports with exact scores, bi-Lipschitz certificates and baselines."""

__version__ = "0.1.0"
