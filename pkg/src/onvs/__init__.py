"""Desk-scale one-shot novel view synthesis.

A coarse stage trains an image-conditioned radiance field in parallel with a
GAN branch (shared density, dual color heads, confidence-weighted fusion); a
fine stage runs a diffusion-style enhancer that keeps an orbit of views
3D-consistent by blending propagated attention tokens from nearby keyframes.
"""

__version__ = "0.1.0"
