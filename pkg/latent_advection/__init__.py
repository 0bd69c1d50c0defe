"""Latent-space semi-Lagrangian advection between two images."""
