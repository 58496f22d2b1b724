"""Hidden-world household environment: simulator, belief-tracking agent and evaluation."""

__version__ = "0.1.0"
