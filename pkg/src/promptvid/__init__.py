"""Image-prompt conditioned toy latent video diffusion."""

__version__ = "0.1.0"
