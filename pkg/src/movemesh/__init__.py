"""Anisotropic moving-mesh finite elements for steady low-Mach reacting flow."""
__version__ = "0.1.0"
