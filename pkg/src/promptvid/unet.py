"""Tiny inflated 3D U-Net with cross-frame, text and temporal attention sites.

Latents enter and leave as ``[B, F, C, H, W]``; inside the network features
are kept channels-last (``[B, F, H, W, C]``) so attention tokens are a plain
reshape. With ``patch_size`` p > 1 each p x p latent patch is folded into the
channel axis on entry and unfolded on exit, a lossless rearrangement that
cuts the cost of the top level by p^2.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import from_tokens, merge_heads, split_heads, temporal_values, text_values, to_tokens
from .autodiff import ParameterStore, RngStream, Tensor
from .errors import ContractError, DimensionError, StateError
from .injection import add_injection_projections, cross_frame_values, prompt_keys_values
from .layers import (add_conv3d, add_group_norm, add_linear, add_resblock, conv3d, group_norm, linear, resblock,
                     sinusoidal)


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 4
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    frames: int = 8
    height: int = 32
    width: int = 32
    attention_levels: tuple[int, ...] = (0, 1, 2)
    head_dim: int = 8
    norm_groups: int = 4
    temb_dim: int = 32
    cond_dim: int = 32
    temporal_kernel: int = 3
    patch_size: int = 1

    def __post_init__(self):
        levels = len(self.channel_multipliers)
        if self.patch_size < 1:
            raise ContractError(f"patch_size must be >= 1, got {self.patch_size}")
        div = self.patch_size * 2 ** (levels - 1)
        if self.height % div or self.width % div:
            raise DimensionError(f"latent {self.height}x{self.width} not divisible by {div}")
        if self.channels(0) < self.folded_channels:
            # a narrower top level cannot carry the input through, so eps = x_t becomes unlearnable
            raise ContractError(f"top level has {self.channels(0)} channels, fewer than the "
                                f"{self.folded_channels} folded input channels")
        for lvl in self.attention_levels:
            if not 0 <= lvl < levels:
                raise ContractError(f"attention level {lvl} outside 0..{levels - 1}")
            if self.channels(lvl) % self.head_dim:
                raise DimensionError(f"head_dim {self.head_dim} does not divide {self.channels(lvl)} channels")
        for lvl in range(levels):
            if self.channels(lvl) % self.norm_groups:
                raise DimensionError(f"norm_groups {self.norm_groups} does not divide {self.channels(lvl)}")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_multipliers[level]

    def resolution(self, level: int) -> tuple[int, int]:
        return (self.height // self.patch_size) >> level, (self.width // self.patch_size) >> level

    @property
    def folded_channels(self) -> int:
        return self.in_channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AttentionSite:
    name: str  # e.g. "enc1" or "dec0"
    level: int
    channels: int
    tokens: int


@dataclass
class FeaturePyramid:
    """Normalised prompt tokens ``[B, N, C]`` per cross-frame attention site, in traversal order."""

    sites: list[str]
    features: list[Tensor]

    def __len__(self) -> int:
        return len(self.sites)

    def get(self, site: str) -> Tensor | None:
        try:
            return self.features[self.sites.index(site)]
        except ValueError:
            return None


@dataclass
class ForwardFlags:
    injection: bool = False
    value_recursion: bool = False


def timestep_embedding(t, dim: int) -> np.ndarray:
    return sinusoidal(np.atleast_1d(t), dim)


class VideoUNet:
    """Parameters live in ``store`` under ``unet``-independent dotted names (``enc0.res.conv1`` ...)."""

    def __init__(self, config: UNetConfig, store: ParameterStore | None = None, rng: RngStream | None = None):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        self.refiner: Callable[[Tensor], Tensor] | None = None
        self.sites = self._site_list()
        if rng is not None:
            self._build(rng)

    # -- structure ------------------------------------------------------------

    def _site_list(self) -> list[AttentionSite]:
        cfg = self.config
        order = [f"enc{lvl}" for lvl in range(cfg.levels)] + [f"dec{lvl}" for lvl in range(cfg.levels - 2, -1, -1)]
        sites = []
        for name in order:
            lvl = int(name[3:])
            if lvl in cfg.attention_levels:
                h, w = cfg.resolution(lvl)
                sites.append(AttentionSite(name, lvl, cfg.channels(lvl), h * w))
        return sites

    @property
    def site_names(self) -> list[str]:
        return [s.name for s in self.sites]

    def _build(self, rng: RngStream) -> None:
        cfg, st = self.config, self.store
        add_linear(st, "time.l0", cfg.temb_dim, cfg.temb_dim, "base", rng.child("time0"))
        add_linear(st, "time.l1", cfg.temb_dim, cfg.temb_dim, "base", rng.child("time1"))
        add_conv3d(st, "conv_in", cfg.folded_channels, cfg.channels(0), self._kernel(), "base", rng.child("conv_in"))
        prev = cfg.channels(0)
        for lvl in range(cfg.levels):
            c = cfg.channels(lvl)
            self._add_resblock(f"enc{lvl}.res", prev, c, rng.child(f"enc{lvl}"))
            if lvl in cfg.attention_levels:
                self._add_attention_block(f"enc{lvl}", c, rng.child(f"enc{lvl}.attn"))
            prev = c
        self._add_attention(f"mid.temporal", cfg.channels(cfg.levels - 1), rng.child("temporal"))
        add_group_norm(st, "mid.temporal.norm", cfg.channels(cfg.levels - 1), "base")
        for lvl in range(cfg.levels - 2, -1, -1):
            c = cfg.channels(lvl)
            self._add_resblock(f"dec{lvl}.res", prev + c, c, rng.child(f"dec{lvl}"))
            if lvl in cfg.attention_levels:
                self._add_attention_block(f"dec{lvl}", c, rng.child(f"dec{lvl}.attn"))
            prev = c
        add_group_norm(st, "out_norm", cfg.channels(0), "base")
        add_conv3d(st, "conv_out", cfg.channels(0), cfg.folded_channels, self._kernel(), "base", rng, zero=True)
        add_injection_projections(st, self.site_names)

    def _kernel(self) -> tuple[int, int, int]:
        return (self.config.temporal_kernel, 3, 3)

    def _add_resblock(self, name: str, c_in: int, c_out: int, rng: RngStream) -> None:
        add_resblock(self.store, name, c_in, c_out, self._kernel(), "base", rng, temb_dim=self.config.temb_dim)

    def _add_attention(self, name: str, c: int, rng: RngStream, kv_tag: str = "base", kv_in: int | None = None):
        st = self.store
        add_linear(st, f"{name}.to_q", c, c, "base", rng.child("q"), bias=False)
        add_linear(st, f"{name}.to_k", kv_in or c, c, kv_tag, rng.child("k"), bias=False)
        add_linear(st, f"{name}.to_v", kv_in or c, c, kv_tag, rng.child("v"), bias=False)
        add_linear(st, f"{name}.to_out", c, c, "base", rng.child("o"), scale=0.5)

    def _add_attention_block(self, site: str, c: int, rng: RngStream) -> None:
        add_group_norm(self.store, f"{site}.xframe.norm", c, "base")
        self._add_attention(f"{site}.xframe", c, rng.child("xframe"))
        add_group_norm(self.store, f"{site}.text.norm", c, "base")
        self._add_attention(f"{site}.text", c, rng.child("text"), kv_tag="stage1", kv_in=self.config.cond_dim)

    # -- blocks -----------------------------------------------------------------

    def time_embedding(self, t) -> Tensor:
        emb = ad.Tensor(timestep_embedding(t, self.config.temb_dim))
        return linear(self.store, "time.l1", ad.silu(linear(self.store, "time.l0", emb)))

    def resblock(self, name: str, x: Tensor, temb: Tensor | None) -> Tensor:
        return resblock(self.store, name, x, self.config.norm_groups, temb)

    def _qkv(self, name: str, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        st, d = self.store, self.config.head_dim
        return (split_heads(linear(st, f"{name}.to_q", x), d), split_heads(linear(st, f"{name}.to_k", x), d),
                split_heads(linear(st, f"{name}.to_v", x), d))

    def cross_frame_tokens(self, site: str, h: Tensor) -> Tensor:
        """Normalised ``[B, F, N, C]`` tokens entering the site's Q/K/V projections."""
        return to_tokens(group_norm(self.store, f"{site}.xframe.norm", h, self.config.norm_groups))

    def cross_frame_attention(self, site: str, h: Tensor, prompt_features: Tensor | None = None,
                              flags: ForwardFlags | None = None) -> Tensor:
        """Residual cross-frame attention on channels-last ``h[B, F, H, W, C]``, optionally with injection."""
        flags = flags or ForwardFlags()
        B, F, H, W, C = h.shape
        x = self.cross_frame_tokens(site, h)
        q, k, v = self._qkv(f"{site}.xframe", x)
        prompt = None
        if flags.injection:
            prompt = prompt_keys_values(self.store, site, prompt_features, self.config.head_dim)
        out = merge_heads(cross_frame_values(q, k, v, prompt, flags.value_recursion))
        out = linear(self.store, f"{site}.xframe.to_out", out)
        return h + from_tokens(out, H, W)

    def text_cross_attention(self, site: str, h: Tensor, cond: Tensor, valid: np.ndarray) -> Tensor:
        """Residual attention from every spatial token to the (padded) condition sequence."""
        st, d = self.store, self.config.head_dim
        if cond.shape[-1] != self.config.cond_dim:
            raise DimensionError(f"condition width {cond.shape[-1]} != cond_dim {self.config.cond_dim}")
        B, F, H, W, C = h.shape
        x = to_tokens(group_norm(st, f"{site}.text.norm", h, self.config.norm_groups))
        q = split_heads(linear(st, f"{site}.text.to_q", x), d)  # [B, F, h, N, d]
        k = split_heads(linear(st, f"{site}.text.to_k", cond), d)  # [B, h, T, d]
        v = split_heads(linear(st, f"{site}.text.to_v", cond), d)
        out = merge_heads(text_values(q, k, v, valid))
        return h + from_tokens(linear(st, f"{site}.text.to_out", out), H, W)

    def temporal_attention(self, name: str, h: Tensor) -> Tensor:
        """Residual attention along frames, independently per spatial token."""
        B, F, H, W, C = h.shape
        x = to_tokens(group_norm(self.store, f"{name}.norm", h, self.config.norm_groups))  # [B, F, N, C]
        q, k, v = self._qkv(name, x)
        out = linear(self.store, f"{name}.to_out", merge_heads(temporal_values(q, k, v)))
        return h + from_tokens(out, H, W)

    # -- forward ------------------------------------------------------------------

    def forward(self, x: Tensor, t, cond: Tensor | None = None, cond_valid: np.ndarray | None = None,
                pyramid: FeaturePyramid | None = None, flags: ForwardFlags | None = None) -> Tensor:
        """Predict noise for ``x[B, F, C, H, W]`` at timesteps ``t[B]``."""
        cfg, st = self.config, self.store
        flags = flags or ForwardFlags()
        if "conv_in.weight" not in st:
            raise StateError("backbone parameters are not initialised")
        x = ad.as_tensor(x)
        if x.ndim != 5 or x.shape[2] != cfg.in_channels:
            raise DimensionError(f"expected [B, F, {cfg.in_channels}, H, W] latent, got {x.shape}")
        if flags.injection and pyramid is None:
            raise StateError("injection enabled but no prompt pyramid supplied")
        h = conv3d(st, "conv_in", self.fold(x))
        temb = self.time_embedding(t)
        skips = []
        for lvl in range(cfg.levels):
            if lvl:
                h = ad.resample2x(h, "down", channels_last=True)
            h = self.resblock(f"enc{lvl}.res", h, temb)
            h = self._attention_block(f"enc{lvl}", lvl, h, cond, cond_valid, pyramid, flags)
            skips.append(h)
        h = self.temporal_attention("mid.temporal", h)
        for lvl in range(cfg.levels - 2, -1, -1):
            h = ad.resample2x(h, "up", channels_last=True)
            h = self.resblock(f"dec{lvl}.res", ad.concat([h, skips[lvl]], axis=-1), temb)
            h = self._attention_block(f"dec{lvl}", lvl, h, cond, cond_valid, pyramid, flags)
        h = self.pre_output(h)
        return self.unfold(conv3d(st, "conv_out", h))

    def fold(self, x: Tensor) -> Tensor:
        """``[B, F, C, H, W]`` latent to channels-last ``[B, F, H/p, W/p, p*p*C]``."""
        p = self.config.patch_size
        B, F, C, H, W = x.shape
        if H % p or W % p:
            raise DimensionError(f"latent {H}x{W} not divisible by patch size {p}")
        if p == 1:
            return x.transpose(0, 1, 3, 4, 2)
        x = x.reshape(B, F, C, H // p, p, W // p, p).transpose(0, 1, 3, 5, 4, 6, 2)
        return x.reshape(B, F, H // p, W // p, p * p * C)

    def unfold(self, h: Tensor) -> Tensor:
        p, C = self.config.patch_size, self.config.in_channels
        B, F, Hp, Wp, _ = h.shape
        if p == 1:
            return h.transpose(0, 1, 4, 2, 3)
        h = h.reshape(B, F, Hp, Wp, p, p, C).transpose(0, 1, 6, 2, 4, 3, 5)
        return h.reshape(B, F, C, Hp * p, Wp * p)

    def pre_output(self, h: Tensor) -> Tensor:
        h = ad.silu(group_norm(self.store, "out_norm", h, self.config.norm_groups))
        if self.refiner is not None:
            h = self.refiner(h)
        return h

    def _attention_block(self, site, lvl, h, cond, cond_valid, pyramid, flags):
        if lvl not in self.config.attention_levels:
            return h
        feats = pyramid.get(site) if pyramid is not None else None
        h = self.cross_frame_attention(site, h, feats, flags)
        if cond is not None:
            h = self.text_cross_attention(site, h, cond, cond_valid)
        return h

    def extract_prompt_pyramid(self, x_i_t, t) -> FeaturePyramid:
        """Run the noised prompt latent ``[B, C, H, W]`` as a one-frame video through the encoder path.

        Captures the normalised tokens entering every encoder cross-frame
        site; decoder sites reuse the encoder capture at the same level.
        Text attention is skipped on this path.
        """
        cfg, st = self.config, self.store
        if "conv_in.weight" not in st:
            raise StateError("backbone parameters are not initialised")
        x = ad.as_tensor(x_i_t)
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise DimensionError(f"expected [B, {cfg.in_channels}, H, W] prompt latent, got {x.shape}")
        B, C, H, W = x.shape
        h = conv3d(st, "conv_in", self.fold(x.reshape(B, 1, C, H, W)))
        temb = self.time_embedding(t)
        by_level: dict[int, Tensor] = {}
        deepest = max(cfg.attention_levels, default=-1)
        for lvl in range(deepest + 1):
            if lvl:
                h = ad.resample2x(h, "down", channels_last=True)
            h = self.resblock(f"enc{lvl}.res", h, temb)
            if lvl in cfg.attention_levels:
                tokens = self.cross_frame_tokens(f"enc{lvl}", h)
                by_level[lvl] = tokens.reshape(B, tokens.shape[2], tokens.shape[3])
                h = self.cross_frame_attention(f"enc{lvl}", h)
        return FeaturePyramid(self.site_names, [by_level[s.level] for s in self.sites])
