"""Desk-scale unified online/offline self-supervised ASR."""

__version__ = "0.1.0"
