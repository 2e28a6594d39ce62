"""Group-level affect estimation from face, body and scene descriptors."""

__version__ = "0.1.0"
