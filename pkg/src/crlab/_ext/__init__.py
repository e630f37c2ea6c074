"""Compiled kernels (optional)."""
