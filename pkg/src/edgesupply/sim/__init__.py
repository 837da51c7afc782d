"""Synthetic catalog, latent users, cloud server and the session engine."""
