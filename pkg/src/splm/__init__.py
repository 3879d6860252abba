"""Byte-level language modeling with patch aggregation and scratchpad states."""

__version__ = "0.1.0"
