"""Feature-level scene codec for feed-forward Gaussian splatting."""

__version__ = "0.1.0"
