"""Temporal KG completion with mined temporal rules and commonsense scores."""

__version__ = "0.1.0"
