"""Container power model training with background power isolation."""

__version__ = "0.1.0"
