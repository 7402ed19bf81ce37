"""Next-hexagon trajectory prediction with a decoder-only transformer."""

__version__ = "0.1.0"
