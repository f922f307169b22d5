"""MuZero-style planning with progressive widening for continuous actions."""

__version__ = "0.1.0"
