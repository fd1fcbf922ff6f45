"""Certified reduced-basis toolkit for stabilized advection-diffusion problems."""

__version__ = "0.1.0"
