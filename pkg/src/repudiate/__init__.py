"""Forging proofs of repudiation against proof-of-learning logs, and measuring them with membership inference."""

from . import attacks, data, forge, metrics, model, pol

__version__ = "0.1.0"

__all__ = ["attacks", "data", "forge", "metrics", "model", "pol", "__version__"]
