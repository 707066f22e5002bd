"""Seed-map refinement by learned pixel affinities and random-walk diffusion."""

__version__ = "0.1.0"
