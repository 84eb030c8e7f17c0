"""Identity-conditioned diffusion on a procedural sprite world."""

__version__ = "0.1.0"
