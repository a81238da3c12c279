"""Prompt-feature injection into cross-frame attention.

The first frame attends over the prompt's keys/values concatenated with its
own, which yields updated first-frame values. Every later frame then attends
with its ordinary keys (first frame and previous frame) but reads the
updated first-frame values in place of the original ones.

All functions take per-head tensors shaped ``[..., tokens, head_dim]``;
leading axes broadcast, so a whole batch of frames can be processed in one
call.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import attention, scores, split_heads
from .autodiff import ParameterStore, Tensor
from .errors import DimensionError, StateError


def add_injection_projections(store: ParameterStore, site_names) -> None:
    """Create ``inject.<site>.to_k/to_v`` as bitwise copies of the site's base K/V projections."""
    for site in site_names:
        for proj in ("to_k", "to_v"):
            base = store[f"{site}.xframe.{proj}.weight"].data
            store.add(f"inject.{site}.{proj}.weight", base.copy(), "stage2")


def project_prompt(features: Tensor, w_k: Tensor, w_v: Tensor) -> tuple[Tensor, Tensor]:
    """Prompt keys and values: ``features @ w_k`` and ``features @ w_v`` (no bias)."""
    features = ad.as_tensor(features)
    if features.shape[-1] != w_k.shape[0] or features.shape[-1] != w_v.shape[0]:
        raise DimensionError(
            f"prompt features of width {features.shape[-1]} do not match projections {w_k.shape}, {w_v.shape}")
    return ad.matmul(features, w_k), ad.matmul(features, w_v)


def update_first_frame(q0: Tensor, k0: Tensor, v0: Tensor, k_i: Tensor, v_i: Tensor) -> Tensor:
    """First-frame values after attending over ``[K_I; K_0]`` / ``[V_I; V_0]``."""
    if k_i.shape[-1] != k0.shape[-1] or v_i.shape[-1] != v0.shape[-1]:
        raise DimensionError(f"prompt width {k_i.shape[-1]}/{v_i.shape[-1]} != frame width {k0.shape[-1]}")
    keys = ad.concat([k_i, k0], axis=-2)
    values = ad.concat([v_i, v0], axis=-2)
    return attention(q0, keys, values)


def propagate_to_frame(q_i: Tensor, k0: Tensor, k_prev: Tensor, v0_new: Tensor, v_prev: Tensor) -> Tensor:
    """Frame ``i >= 1``: weights from the original keys ``[K_0; K_{i-1}]``, values ``[V_0^new; V_{i-1}]``."""
    if v0_new.shape[-2] != k0.shape[-2] or v_prev.shape[-2] != k_prev.shape[-2]:
        raise DimensionError(
            f"key/value row mismatch: K_0 {k0.shape[-2]} vs V_0^new {v0_new.shape[-2]}, "
            f"K_prev {k_prev.shape[-2]} vs V_prev {v_prev.shape[-2]}")
    s = ad.concat([scores(q_i, k0), scores(q_i, k_prev)], axis=-1)
    w = ad.softmax_lastdim(s)
    n0 = k0.shape[-2]
    return ad.matmul(w[..., :n0], v0_new) + ad.matmul(w[..., n0:], v_prev)


def cross_frame_values(q: Tensor, k: Tensor, v: Tensor, prompt: tuple[Tensor, Tensor] | None = None,
                       recursive: bool = False) -> Tensor:
    """Per-frame attention outputs for ``q, k, v`` shaped ``[B, F, heads, N, d]``.

    Without ``prompt`` this is plain cross-frame attention: frame 0 attends
    to itself, frame ``i`` to frames 0 and ``i - 1``. With ``prompt = (K_I,
    V_I)`` (``[B, heads, N_I, d]``) frame 0 is updated first and its new
    values are propagated. ``recursive`` (injection only) feeds each frame's
    output forward as ``V_{i-1}`` instead of the original values.
    """
    F = q.shape[1]
    q0, k0, v0 = q[:, 0], k[:, 0], v[:, 0]
    if prompt is None:
        v0_new = attention(q0, k0, v0)
    else:
        v0_new = update_first_frame(q0, k0, v0, prompt[0], prompt[1])
    first = _with_frame_axis(v0_new)
    if F == 1:
        return first
    if prompt is None:
        rest = propagate_to_frame(q[:, 1:], k[:, 0:1], k[:, :-1], v[:, 0:1], v[:, :-1])
        return ad.concat([first, rest], axis=1)
    if not recursive:
        rest = propagate_to_frame(q[:, 1:], k[:, 0:1], k[:, :-1], first, v[:, :-1])
        return ad.concat([first, rest], axis=1)
    outs = [v0_new]
    for i in range(1, F):
        outs.append(propagate_to_frame(q[:, i], k0, k[:, i - 1], v0_new, outs[i - 1]))
    return ad.stack(outs, axis=1)


def _with_frame_axis(x: Tensor) -> Tensor:
    return x.reshape(x.shape[:1] + (1,) + x.shape[1:])


def prompt_keys_values(store: ParameterStore, site: str, features: Tensor | None, head_dim: int):
    if features is None:
        raise StateError(f"no prompt features for attention site {site!r}")
    k_i, v_i = project_prompt(features, store[f"inject.{site}.to_k.weight"], store[f"inject.{site}.to_v.weight"])
    return split_heads(k_i, head_dim), split_heads(v_i, head_dim)


def empty_prompt(k: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-row prompt keys/values matching ``k[B, F, heads, N, d]``."""
    B, _, h, _, d = k.shape
    z = ad.Tensor(np.zeros((B, h, 0, d)), dtype=k.dtype)
    return z, z


def sync_injection_projections(store: ParameterStore, site_names) -> None:
    """Reset every ``inject.<site>`` projection to a bitwise copy of the site's current base K/V."""
    for site in site_names:
        for proj in ("to_k", "to_v"):
            dst = store[f"inject.{site}.{proj}.weight"]
            dst.data = store[f"{site}.xframe.{proj}.weight"].data.copy()
