"""Scaled dot-product attention primitives on ``[..., tokens, head_dim]`` tensors."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError


def scores(q: Tensor, k: Tensor) -> Tensor:
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    return ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))


def attention(q: Tensor, k: Tensor, v: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` with weights normalised over keys."""
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    return ad.matmul(ad.softmax_lastdim(scores(q, k), valid), v)


def attention_weights(q: Tensor, k: Tensor, valid: np.ndarray | None = None) -> Tensor:
    return ad.softmax_lastdim(scores(q, k), valid)


def split_heads(x: Tensor, head_dim: int) -> Tensor:
    """``[..., N, C] -> [..., heads, N, head_dim]``."""
    *lead, n, c = x.shape
    if c % head_dim:
        raise DimensionError(f"head_dim {head_dim} does not divide channel count {c}")
    h = c // head_dim
    x = x.reshape(*lead, n, h, head_dim)
    nd = len(lead)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2)


def merge_heads(x: Tensor) -> Tensor:
    """``[..., heads, N, head_dim] -> [..., N, heads * head_dim]``."""
    *lead, h, n, d = x.shape
    nd = len(lead)
    return x.transpose(*range(nd), nd + 1, nd, nd + 2).reshape(*lead, n, h * d)


def to_tokens(h: Tensor) -> Tensor:
    """Channels-last video features ``[B, F, H, W, C] -> [B, F, H*W, C]``."""
    B, F, H, W, C = h.shape
    return h.reshape(B, F, H * W, C)


def from_tokens(x: Tensor, height: int, width: int) -> Tensor:
    B, F, N, C = x.shape
    return x.reshape(B, F, height, width, C)


def temporal_values(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Attention along frames for ``[B, F, heads, N, d]`` inputs, independently per token."""
    perm = (0, 3, 2, 1, 4)  # [B, N, heads, F, d]
    out = attention(q.transpose(*perm), k.transpose(*perm), v.transpose(*perm))
    return out.transpose(*perm)


def text_values(q: Tensor, k: Tensor, v: Tensor, valid: np.ndarray) -> Tensor:
    """Every token of ``q[B, F, heads, N, d]`` attends to the condition ``k, v[B, heads, T, d]``.

    ``valid[B, T]`` is False at padding, which receives exactly zero weight.
    """
    nb, nh, nt, d = k.shape
    k = k.reshape(nb, 1, nh, nt, d)
    v = v.reshape(nb, 1, nh, nt, d)
    mask = np.asarray(valid, dtype=bool).reshape(nb, 1, 1, 1, nt)
    return attention(q, k, v, mask)
