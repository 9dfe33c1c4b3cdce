"""Detect Tor Browser Bundle use from registry hives, raw images and memory dumps."""

__version__ = "0.1.0"
