"""Power-system stress datasets, security index and a from-scratch CNN predictor."""

__version__ = "0.1.0"
