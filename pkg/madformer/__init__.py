"""Desk-scale hybrid autoregressive-diffusion transformer."""
