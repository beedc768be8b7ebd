"""Instanton search for static overloads in DC power grids."""

__version__ = "0.1.0"
