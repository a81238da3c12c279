"""Six-block residual refiner inserted before the backbone's output convolution.

Layout on channels-last features ``[B, F, H, W, C]``::

    down0: /2, res(C -> w0), res(w0 -> w0)          -> d0
    down1: /2, res(w0 -> w1), res(w1 -> w1)         -> d1
    mid0:  res(w1 -> w2), res(w2 -> w2)
    mid1:  res(w2 -> w2), res(w2 -> w2)
    up1:   res(w2 -> w1), res(w1 -> w1), + d1, x2
    up0:   res(w1 -> w0), res(w0 -> w0), + d0, x2
    out:   zero-initialised conv(w0 -> C)

Skips are additive. The output conv starts at zero, so a fresh refiner
returns exactly 0 and ``features + refiner(features)`` is bit-identical to
``features``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, RngStream, Tensor
from .errors import ContractError, DimensionError, StateError
from .layers import add_conv3d, add_resblock, conv3d, resblock

BLOCKS = ("down0", "down1", "mid0", "mid1", "up1", "up0")


@dataclass(frozen=True)
class RefinerConfig:
    channels: int  # width of the features it refines
    widths: tuple[int, int, int] = (16, 16, 16)
    kernel: tuple[int, int, int] = (1, 3, 3)
    norm_groups: int = 4

    def __post_init__(self):
        if len(self.widths) != 3:
            raise ContractError(f"refiner needs three widths, got {self.widths}")
        for w in (self.channels,) + tuple(self.widths):
            if w % self.norm_groups:
                raise DimensionError(f"norm_groups {self.norm_groups} does not divide width {w}")

    def block_io(self) -> list[tuple[str, int, int, int]]:
        """``(block, c_in, c_mid, c_out)`` for the two resblocks of every block."""
        c, (w0, w1, w2) = self.channels, self.widths
        return [("down0", c, w0, w0), ("down1", w0, w1, w1), ("mid0", w1, w2, w2),
                ("mid1", w2, w2, w2), ("up1", w2, w1, w1), ("up0", w1, w0, w0)]


def _resblock_params(c_in: int, c_out: int, k: int) -> int:
    n = 2 * c_in + c_in * c_out * k + c_out + 2 * c_out + c_out * c_out * k + c_out
    if c_in != c_out:
        n += c_in * c_out + c_out
    return n


def parameter_count(config: RefinerConfig) -> int:
    """Closed-form count: every block's two resblocks plus the output conv."""
    k = int(np.prod(config.kernel))
    total = 0
    for _, c_in, c_mid, c_out in config.block_io():
        total += _resblock_params(c_in, c_mid, k) + _resblock_params(c_mid, c_out, k)
    w0 = config.widths[0]
    return total + w0 * config.channels * k + config.channels


def build_refiner(store: ParameterStore, config: RefinerConfig, rng: RngStream, prefix: str = "refiner") -> None:
    for block, c_in, c_mid, c_out in config.block_io():
        r = rng.child(block)
        add_resblock(store, f"{prefix}.{block}.res0", c_in, c_mid, config.kernel, "refiner", r.child(0))
        add_resblock(store, f"{prefix}.{block}.res1", c_mid, c_out, config.kernel, "refiner", r.child(1))
    add_conv3d(store, f"{prefix}.out", config.widths[0], config.channels, config.kernel, "refiner", rng, zero=True)


class Refiner:
    def __init__(self, store: ParameterStore, config: RefinerConfig, prefix: str = "refiner"):
        if f"{prefix}.out.weight" not in store:
            raise StateError("refiner parameters have not been built")
        self.store, self.config, self.prefix = store, config, prefix

    def _block(self, name: str, h: Tensor) -> Tensor:
        g = self.config.norm_groups
        h = resblock(self.store, f"{self.prefix}.{name}.res0", h, g)
        return resblock(self.store, f"{self.prefix}.{name}.res1", h, g)

    def __call__(self, x: Tensor) -> Tensor:
        """Refinement signal for channels-last ``x``; zero at initialisation."""
        if x.shape[-1] != self.config.channels:
            raise DimensionError(f"refiner expects {self.config.channels} channels, got {x.shape[-1]}")
        H, W = x.shape[-3], x.shape[-2]
        if H % 4 or W % 4:
            raise DimensionError(f"refiner input {H}x{W} not divisible by 4")
        d0 = self._block("down0", ad.resample2x(x, "down", channels_last=True))
        d1 = self._block("down1", ad.resample2x(d0, "down", channels_last=True))
        h = self._block("mid1", self._block("mid0", d1))
        h = ad.resample2x(self._block("up1", h) + d1, "up", channels_last=True)
        h = ad.resample2x(self._block("up0", h) + d0, "up", channels_last=True)
        return conv3d(self.store, f"{self.prefix}.out", h)

    def apply(self, features: Tensor) -> Tensor:
        """``features + refiner(features)``, the input to the final output conv."""
        delta = self(features)
        if delta.shape != features.shape:
            raise DimensionError(f"refiner output {delta.shape} != features {features.shape}")
        return features + delta


def apply_refined_output(refiner: Refiner, features: Tensor) -> Tensor:
    return refiner.apply(features)
