"""Toy flow-matching video transformer for audio-driven talking portraits."""

__version__ = "0.1.0"
