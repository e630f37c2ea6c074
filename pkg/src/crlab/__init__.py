"""Numerical laboratory for integral homotopy operators on CR submanifolds."""

__version__ = "0.1.0"
