"""Desk-scale emergent-communication simulator with exact verification."""

__version__ = "0.1.0"
