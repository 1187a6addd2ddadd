"""Representational and functional knowledge transfer with contrastive self-supervision."""

__version__ = "0.1.0"
