"""Dynamic auto-encoder for weekly fire-risk map prediction under partial observation."""

__version__ = "0.1.0"
