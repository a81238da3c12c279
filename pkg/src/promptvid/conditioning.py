"""Frozen toy text/image encoders, the trainable mapper and caption fusion.

The frozen encoders are random projections generated from ``frozen_seed``.
They are not semantically meaningful: they only reproduce the interfaces of
a CLIP-style text and image encoder so that conditioning, training and the
alignment metrics can be exercised end to end.
"""
from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, RngStream, Tensor
from .errors import ContractError, DimensionError, SpanError, VocabularyError
from .layers import add_linear, linear, sinusoidal
from .lexicon import NULL_TOKEN, UNK_TOKEN, default_vocabulary

NULL_ID = 0
UNK_ID = 1


class Vocabulary:
    """Word-level vocabulary; a token's id is its line number in the vocabulary file."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != [NULL_TOKEN, UNK_TOKEN]:
            raise VocabularyError(f"vocabulary must start with {NULL_TOKEN!r} and {UNK_TOKEN!r}")
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def default(cls) -> Vocabulary:
        return cls(default_vocabulary())

    @classmethod
    def load(cls, path) -> Vocabulary:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)


def split_words(caption: str) -> list[str]:
    return re.findall(r"[a-z0-9']+", caption.lower())


@dataclass
class TextTokenSeq:
    token_ids: list[int]
    pad_mask: list[bool]  # True marks padding

    @property
    def length(self) -> int:
        return len(self.pad_mask) - sum(self.pad_mask)


def tokenize(caption: str, vocab: Vocabulary, max_tokens: int) -> TextTokenSeq:
    ids = [vocab.id(w) for w in split_words(caption)]
    if len(ids) > max_tokens:
        raise ContractError(f"caption has {len(ids)} tokens, more than max_tokens={max_tokens}")
    pad = max_tokens - len(ids)
    return TextTokenSeq(ids + [NULL_ID] * pad, [False] * len(ids) + [True] * pad)


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = len(default_vocabulary())
    d_txt: int = 32
    image_patch: int = 4  # patch grid cells per image side
    image_channels: int = 3
    d_img: int = 32
    mapper_hidden_widths: tuple[int, ...] | None = None  # default: two layers of 4 * d_txt
    max_tokens: int = 16
    frozen_seed: int = 1234

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        if self.mapper_hidden_widths is None:
            return (4 * self.d_txt, 4 * self.d_txt)
        return tuple(self.mapper_hidden_widths)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def grid_means(image: np.ndarray, grid: int) -> np.ndarray:
    """Average ``image[..., H, W, C]`` over a ``grid x grid`` partition; returns ``[..., grid, grid, C]``."""
    H, W = image.shape[-3], image.shape[-2]
    if H <= 0 or W <= 0 or image.shape[-1] <= 0:
        raise DimensionError(f"image extents must be positive, got {image.shape}")
    if H < grid or W < grid:
        raise DimensionError(f"image {H}x{W} smaller than the {grid}x{grid} patch grid")
    ys = np.round(np.linspace(0, H, grid + 1)).astype(int)
    xs = np.round(np.linspace(0, W, grid + 1)).astype(int)
    rows = [image[..., ys[i] : ys[i + 1], :, :] for i in range(grid)]
    cells = [[r[..., xs[j] : xs[j + 1], :].mean(axis=(-3, -2)) for j in range(grid)] for r in rows]
    return np.stack([np.stack(c, axis=-2) for c in cells], axis=-3)


class FrozenEncoders:
    """Deterministic stand-ins for the text and image towers; never trained."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = RngStream(config.frozen_seed)
        d = config.d_txt
        self.text_table = rng.child("text_table").normal((config.vocab_size, d), np.float64)
        self.positions = sinusoidal(np.arange(config.max_tokens), d)
        n_in = config.image_patch**2 * config.image_channels
        self.image_weight = rng.child("image_proj").normal((n_in, config.d_img), np.float64) / np.sqrt(n_in)
        self.image_bias = rng.child("image_bias").normal((config.d_img,), np.float64) * 0.05
        # Maps pooled text features into the image embedding space (text/image alignment score).
        self.text_to_joint = rng.child("text_joint").normal((d, config.d_img), np.float64) / np.sqrt(d)

    def encode_text(self, tokens: TextTokenSeq) -> np.ndarray:
        """Embedding-table lookup plus sinusoidal offsets, one row per position (pads included)."""
        ids = np.asarray(tokens.token_ids)
        if len(ids) > self.config.max_tokens:
            raise ContractError(f"{len(ids)} tokens exceed max_tokens={self.config.max_tokens}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of size {self.config.vocab_size}")
        return self.text_table[ids] + self.positions[: len(ids)]

    def null_rows(self) -> np.ndarray:
        return self.text_table[NULL_ID] + self.positions

    def encode_image_coarse(self, image: np.ndarray) -> np.ndarray:
        """Patch-grid means of ``image[..., H, W, C]`` through the fixed linear projection."""
        image = np.asarray(image, dtype=np.float64)
        if image.ndim < 3:
            raise DimensionError(f"expected [..., H, W, C] image, got shape {image.shape}")
        if image.shape[-1] != self.config.image_channels:
            raise DimensionError(f"expected {self.config.image_channels} channels, got {image.shape[-1]}")
        cells = grid_means(image, self.config.image_patch)
        flat = cells.reshape(cells.shape[:-3] + (-1,))
        return flat @ self.image_weight + self.image_bias

    def pooled_text(self, tokens: TextTokenSeq) -> np.ndarray:
        rows = self.encode_text(tokens)[: tokens.length]
        if not len(rows):
            raise ContractError("cannot pool an empty caption")
        return rows.mean(axis=0) @ self.text_to_joint


# -- trainable mapper ----------------------------------------------------------


def build_mapper(store: ParameterStore, config: EncoderConfig, rng: RngStream) -> None:
    widths = (config.d_img,) + config.hidden_widths + (config.d_txt,)
    last = len(widths) - 2
    for i in range(len(widths) - 1):
        add_linear(store, f"mapper.l{i}", widths[i], widths[i + 1], "stage1", rng.child(f"mapper{i}"), zero=i == last)


def map_to_text_space(store: ParameterStore, f_v, config: EncoderConfig) -> Tensor:
    """MLP from image-feature width to text-embedding width, SiLU between layers."""
    h = ad.as_tensor(f_v)
    if h.shape[-1] != config.d_img:
        raise DimensionError(f"mapper expects width {config.d_img}, got {h.shape[-1]}")
    n_layers = len(config.hidden_widths) + 1
    for i in range(n_layers):
        h = linear(store, f"mapper.l{i}", h)
        if i < n_layers - 1:
            h = ad.silu(h)
    return h


# -- fusion ----------------------------------------------------------------------


@dataclass
class ComposedCondition:
    embeddings: Tensor  # (max_tokens, d_txt)
    pad_mask: np.ndarray  # True marks padding
    image_slot: int | None = None
    length: int = 0

    @property
    def valid(self) -> np.ndarray:
        return ~self.pad_mask


def fuse(f_t, f_i: Tensor, k: int, n: int, pad_rows: np.ndarray | None = None,
         max_tokens: int | None = None) -> ComposedCondition:
    """Replace the ``n`` word embeddings starting at ``k`` with the single vector ``f_i``.

    ``f_t`` holds the embeddings of the real (non-pad) tokens only. The result
    is re-padded to ``max_tokens`` rows with ``pad_rows[j]`` (or zeros) at
    each padded position ``j``.
    """
    f_t = ad.as_tensor(f_t)
    f_i = ad.as_tensor(f_i)
    if n < 1:
        raise ContractError(f"span length must be >= 1, got n={n}")
    L = f_t.shape[0]
    if k < 0 or k + n > L:
        raise SpanError(f"span k={k}, n={n} outside caption of {L} tokens")
    if f_i.shape != (f_t.shape[1],):
        raise DimensionError(f"image token width {f_i.shape} does not match text width {f_t.shape[1]}")
    if max_tokens is None:
        max_tokens = pad_rows.shape[0] if pad_rows is not None else L
    length = L - n + 1
    parts = [f_t[:k], f_i.reshape(1, -1), f_t[k + n :]]
    if max_tokens > length:
        fill = pad_rows[length:max_tokens] if pad_rows is not None else np.zeros((max_tokens - length, f_t.shape[1]))
        parts.append(ad.Tensor(fill, dtype=f_t.dtype))
    emb = ad.concat([p for p in parts if p.shape[0]], axis=0)
    pad_mask = np.arange(max_tokens) >= length
    return ComposedCondition(emb, pad_mask, image_slot=k, length=length)


def text_condition(encoders: FrozenEncoders, tokens: TextTokenSeq) -> ComposedCondition:
    emb = encoders.encode_text(tokens)
    return ComposedCondition(ad.Tensor(emb), np.asarray(tokens.pad_mask), None, tokens.length)


def compose_condition(encoders: FrozenEncoders, store: ParameterStore, tokens: TextTokenSeq,
                      f_v: np.ndarray, k: int, n: int) -> ComposedCondition:
    """Text embedding with the subject span replaced by the mapped image embedding."""
    emb = encoders.encode_text(tokens)
    f_i = map_to_text_space(store, ad.Tensor(f_v).reshape(1, -1), encoders.config).reshape(-1)
    return fuse(emb[: tokens.length], f_i, k, n, pad_rows=encoders.null_rows())


def stack_conditions(conds: Sequence[ComposedCondition]) -> tuple[Tensor, np.ndarray]:
    """Batch conditions into ``([B, T, d], valid[B, T])``."""
    emb = ad.stack([c.embeddings for c in conds], axis=0)
    return emb, np.stack([c.valid for c in conds])
