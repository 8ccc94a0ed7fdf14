"""Explainable two-layer prognosis over diffusion-autoencoder latents."""
__version__ = "0.1.0"
