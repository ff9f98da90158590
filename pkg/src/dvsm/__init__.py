"""Decoder-only view synthesis: KV-cache scene reconstruction and camera-only rendering."""

__version__ = "0.1.0"
