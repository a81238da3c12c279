"""Frozen linear stand-in for the latent autoencoder.

Pixels ``[..., H, W, 3]`` map to latents ``[..., C, H, W]`` through a fixed
matrix with orthonormal columns, so decoding with its transpose is an exact
inverse on every encoded latent (and the orthogonal projection otherwise).
"""
from __future__ import annotations

import numpy as np

from .autodiff import RngStream
from .errors import DimensionError


class LinearCodec:
    def __init__(self, latent_channels: int = 4, pixel_channels: int = 3, seed: int = 1234):
        if latent_channels < pixel_channels:
            raise DimensionError(f"latent width {latent_channels} < pixel width {pixel_channels}")
        raw = RngStream(seed).child("codec").normal((latent_channels, pixel_channels), np.float64)
        q, r = np.linalg.qr(raw)
        self.matrix = q * np.sign(np.diag(r))  # [C, 3], orthonormal columns
        self.latent_channels = latent_channels
        self.pixel_channels = pixel_channels

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels)
        if pixels.shape[-1] != self.pixel_channels:
            raise DimensionError(f"expected {self.pixel_channels} pixel channels, got {pixels.shape}")
        z = pixels @ self.matrix.T.astype(pixels.dtype)  # [..., H, W, C]
        return np.moveaxis(z, -1, -3)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        latents = np.asarray(latents)
        if latents.ndim < 3 or latents.shape[-3] != self.latent_channels:
            raise DimensionError(f"expected [..., {self.latent_channels}, H, W] latent, got {latents.shape}")
        return np.moveaxis(latents, -3, -1) @ self.matrix.astype(latents.dtype)

    def clamp(self, latents: np.ndarray, low: float = -1.0, high: float = 1.0) -> np.ndarray:
        """Nearest-pixel projection: decode, clip to the pixel range, re-encode.

        Every encoded clip is a fixed point, so this only moves latents that
        no valid pixel video could have produced.
        """
        return self.encode(np.clip(self.decode(latents), low, high))
