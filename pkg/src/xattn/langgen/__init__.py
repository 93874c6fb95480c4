"""Synthetic multilingual reasoning data."""
