"""Parameter initialisers and small functional layers over a ParameterStore."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, RngStream, Tensor
from .errors import DimensionError


def add_linear(store: ParameterStore, name: str, fan_in: int, fan_out: int, tag: str, rng: RngStream,
               bias: bool = True, zero: bool = False, scale: float = 1.0) -> None:
    w = np.zeros((fan_in, fan_out)) if zero else rng.normal((fan_in, fan_out), np.float64) * (scale / np.sqrt(fan_in))
    store.add(f"{name}.weight", w, tag)
    if bias:
        store.add(f"{name}.bias", np.zeros(fan_out), tag)


def linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    out = ad.matmul(x, store[f"{name}.weight"])
    bias = f"{name}.bias"
    if bias in store:
        out = out + store[bias]
    return out


def add_conv3d(store: ParameterStore, name: str, c_in: int, c_out: int, kernel, tag: str, rng: RngStream,
               zero: bool = False) -> None:
    kernel = tuple(kernel)
    shape = (c_out, c_in) + kernel
    fan_in = c_in * int(np.prod(kernel))
    w = np.zeros(shape) if zero else rng.normal(shape, np.float64) / np.sqrt(fan_in)
    store.add(f"{name}.weight", w, tag)
    store.add(f"{name}.bias", np.zeros(c_out), tag)


def conv3d(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    """Channels-last ``[B, F, H, W, C]`` convolution with the stored kernel."""
    return ad.conv3d(x, store[f"{name}.weight"], store[f"{name}.bias"], channels_last=True)


def add_group_norm(store: ParameterStore, name: str, channels: int, tag: str) -> None:
    store.add(f"{name}.weight", np.ones(channels), tag)
    store.add(f"{name}.bias", np.zeros(channels), tag)


def group_norm(store: ParameterStore, name: str, x: Tensor, groups: int) -> Tensor:
    return ad.group_norm(x, groups, store[f"{name}.weight"], store[f"{name}.bias"], channels_last=True)


def add_resblock(store: ParameterStore, name: str, c_in: int, c_out: int, kernel, tag: str, rng: RngStream,
                 temb_dim: int | None = None) -> None:
    """GroupNorm, SiLU, conv, twice, with a 1x1x1 skip when widths differ; the second conv starts at zero."""
    add_group_norm(store, f"{name}.norm1", c_in, tag)
    add_conv3d(store, f"{name}.conv1", c_in, c_out, kernel, tag, rng.child("conv1"))
    if temb_dim is not None:
        add_linear(store, f"{name}.temb", temb_dim, c_out, tag, rng.child("temb"))
    add_group_norm(store, f"{name}.norm2", c_out, tag)
    add_conv3d(store, f"{name}.conv2", c_out, c_out, kernel, tag, rng.child("conv2"), zero=True)
    if c_in != c_out:
        add_conv3d(store, f"{name}.skip", c_in, c_out, (1, 1, 1), tag, rng.child("skip"))


def resblock(store: ParameterStore, name: str, x: Tensor, groups: int, temb: Tensor | None = None) -> Tensor:
    """Channels-last residual block; ``temb[B, temb_dim]`` is added after the first conv when given."""
    expect = store[f"{name}.norm1.weight"].shape[0]
    if x.shape[-1] != expect:
        raise DimensionError(f"{name}: input has {x.shape[-1]} channels, block expects {expect}")
    h = conv3d(store, f"{name}.conv1", ad.silu(group_norm(store, f"{name}.norm1", x, groups)))
    if temb is not None and f"{name}.temb.weight" in store:
        h = h + linear(store, f"{name}.temb", ad.silu(temb)).reshape(temb.shape[0], 1, 1, 1, -1)
    h = conv3d(store, f"{name}.conv2", ad.silu(group_norm(store, f"{name}.norm2", h, groups)))
    skip = conv3d(store, f"{name}.skip", x) if f"{name}.skip.weight" in store else x
    return skip + h


def sinusoidal(positions, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sin/cos features of shape ``(len(positions), dim)``: even columns sine, odd cosine."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    freqs = max_period ** (-np.arange(0, dim, 2) / dim)
    out = np.zeros((pos.shape[0], dim))
    out[:, 0::2] = np.sin(pos * freqs)
    out[:, 1::2] = np.cos(pos * freqs[: dim // 2])
    return out
