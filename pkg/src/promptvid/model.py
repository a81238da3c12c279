"""The assembled model: backbone, frozen encoders, mapper, codec and optional refiner.

Conditioning modes:

``text``
    plain caption embeddings (the text-only baseline);
``coarse``
    the subject span replaced by the mapped image embedding;
``full``
    coarse condition plus prompt injection into cross-frame attention.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, RngStream, Tensor
from .codec import LinearCodec
from .conditioning import (EncoderConfig, FrozenEncoders, TextTokenSeq, Vocabulary, build_mapper, fuse,
                           map_to_text_space, tokenize)
from .dataset import ClipRecord, extract_prompt_image, parse_subject_span
from .diffusion import NoiseSchedule, build_schedule, forward_noise
from .errors import ContractError, DimensionError, StateError
from .refiner import Refiner, RefinerConfig, build_refiner
from .unet import FeaturePyramid, ForwardFlags, UNetConfig, VideoUNet

MODES = ("text", "coarse", "full")


@dataclass(frozen=True)
class ScheduleConfig:
    T_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass(frozen=True)
class ModelConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    refiner_widths: tuple[int, int, int] | None = None  # None: no refiner
    init_seed: int = 0

    def __post_init__(self):
        if self.unet.cond_dim != self.encoder.d_txt:
            raise DimensionError(f"unet cond_dim {self.unet.cond_dim} != text width {self.encoder.d_txt}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that fixes parameter shapes and frozen weights (not ``init_seed``)."""
        d = self.to_dict()
        d.pop("init_seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PromptBundle:
    """One conditioning unit: caption tokens, subject span, prompt image and its latent."""

    caption: str
    tokens: TextTokenSeq
    span: tuple[int, int]
    prompt_image: np.ndarray  # [H, W, 3]
    prompt_latent: np.ndarray  # [C, H, W]
    f_v: np.ndarray  # coarse visual embedding [d_img]


class PromptVideoModel:
    def __init__(self, config: ModelConfig, store: ParameterStore | None = None, build: bool = True):
        self.config = config
        self.store = store if store is not None else ParameterStore()
        self.vocab = Vocabulary.default()
        if len(self.vocab) != config.encoder.vocab_size:
            raise ContractError(f"vocabulary has {len(self.vocab)} tokens, config says {config.encoder.vocab_size}")
        self.encoders = FrozenEncoders(config.encoder)
        self.codec = LinearCodec(config.unet.in_channels, config.encoder.image_channels, config.encoder.frozen_seed)
        self.schedule: NoiseSchedule = build_schedule(**dataclasses.asdict(config.schedule))
        rng = RngStream(config.init_seed) if build else None
        self.unet = VideoUNet(config.unet, self.store, rng.child("unet") if rng else None)
        if build:
            build_mapper(self.store, config.encoder, rng.child("mapper"))
            if config.refiner_widths is not None:
                build_refiner(self.store, self.refiner_config, rng.child("refiner"))
        self.watermark_removal = False

    @property
    def refiner_config(self) -> RefinerConfig:
        if self.config.refiner_widths is None:
            raise StateError("model was configured without a refiner")
        u = self.config.unet
        return RefinerConfig(u.channels(0), tuple(self.config.refiner_widths), (u.temporal_kernel, 3, 3),
                             u.norm_groups)

    def set_watermark_removal(self, on: bool) -> None:
        self.watermark_removal = on
        self.unet.refiner = Refiner(self.store, self.refiner_config).apply if on else None

    # -- bundles -------------------------------------------------------------------

    def make_bundle(self, caption: str, prompt_image: np.ndarray, span: tuple[int, int] | None = None) -> PromptBundle:
        tokens = tokenize(caption, self.vocab, self.config.encoder.max_tokens)
        if span is None:
            parse = parse_subject_span(caption)
            span = (parse.k, parse.n)
        img = np.asarray(prompt_image, dtype=np.float64)
        H, W = self.config.unet.height, self.config.unet.width
        if img.shape != (H, W, self.config.encoder.image_channels):
            raise DimensionError(f"prompt image must be {H}x{W}x{self.config.encoder.image_channels}, got {img.shape}")
        latent = self.codec.encode(img)
        f_v = self.encoders.encode_image_coarse(img)
        return PromptBundle(caption, tokens, tuple(span), img, latent, f_v)

    def bundle_for_record(self, record: ClipRecord) -> PromptBundle:
        return self.make_bundle(record.caption, extract_prompt_image(record, self.config.unet.height), record.span)

    def video_latent(self, video: np.ndarray) -> np.ndarray:
        """Pixel clip ``[F, H, W, 3]`` (or a batch of them) to ``[..., F, C, H, W]``."""
        return self.codec.encode(np.asarray(video, dtype=np.float64))

    # -- conditioning ----------------------------------------------------------------

    def condition(self, bundles: Sequence[PromptBundle], mode: str) -> tuple[Tensor, np.ndarray]:
        """Batched condition ``([B, T, d_txt], valid[B, T])`` for ``mode``."""
        if mode not in MODES:
            raise ContractError(f"unknown conditioning mode {mode!r}")
        enc = self.encoders
        if mode == "text":
            emb = np.stack([enc.encode_text(b.tokens) for b in bundles])
            valid = ~np.stack([np.asarray(b.tokens.pad_mask) for b in bundles])
            return Tensor(emb), valid
        f_i = map_to_text_space(self.store, Tensor(np.stack([b.f_v for b in bundles])), self.config.encoder)
        null = enc.null_rows()
        conds = []
        for i, b in enumerate(bundles):
            rows = enc.encode_text(b.tokens)[: b.tokens.length]
            conds.append(fuse(rows, f_i[i], b.span[0], b.span[1], pad_rows=null))
        return ad.stack([c.embeddings for c in conds], axis=0), np.stack([c.valid for c in conds])

    def prompt_pyramid(self, bundles: Sequence[PromptBundle], t: np.ndarray, eps_prompt: np.ndarray) -> FeaturePyramid:
        """Noise every prompt latent to its ``t`` with ``eps_prompt`` and tap the encoder path (no gradient)."""
        z = np.stack([b.prompt_latent for b in bundles]).astype(ad.get_default_dtype())
        x_i_t = forward_noise(self.schedule, z, t, eps_prompt.astype(z.dtype))
        with ad.no_grad():
            return self.unet.extract_prompt_pyramid(x_i_t, t)

    def predict_eps(self, x_t, t, bundles: Sequence[PromptBundle], mode: str, eps_prompt: np.ndarray | None = None,
                    value_recursion: bool = False) -> Tensor:
        cond, valid = self.condition(bundles, mode)
        pyramid = None
        if mode == "full":
            if eps_prompt is None:
                raise StateError("full mode needs prompt noise")
            pyramid = self.prompt_pyramid(bundles, np.asarray(t), eps_prompt)
        flags = ForwardFlags(injection=mode == "full", value_recursion=value_recursion)
        return self.unet.forward(x_t, t, cond, valid, pyramid, flags)

    def digest(self) -> str:
        return self.store.digest()
