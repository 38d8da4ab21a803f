"""Dynamic street-scene Gaussian splatting with a streamlined render pipeline."""

__version__ = "0.1.0"
