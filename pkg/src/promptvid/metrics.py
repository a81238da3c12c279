"""Frame-averaged alignment scores over the frozen toy embedders.

All scores are cosine similarities scaled by 100 and averaged over frames.
The embedders are the random-projection stand-ins from ``conditioning`` plus
a second, independently seeded embedder playing the role of the
self-supervised feature space. Absolute values mean nothing; only paired
comparisons on the same test set do.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import RngStream
from .conditioning import EncoderConfig, FrozenEncoders, TextTokenSeq, grid_means
from .errors import DimensionError, MetricError

METRICS = ("clip_text", "clip_image", "dino")


def cosine100(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine x 100 between broadcastable ``[..., d]`` arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("zero-norm embedding")
    return 100.0 * np.sum(a * b, axis=-1) / (na * nb)


def frame_average(frame_emb: np.ndarray, ref_emb: np.ndarray) -> float:
    """Mean over frames of ``cosine100(frame_emb[f], ref_emb)``."""
    if frame_emb.ndim != 2:
        raise DimensionError(f"expected [frames, d] embeddings, got {frame_emb.shape}")
    return float(np.mean(cosine100(frame_emb, ref_emb[None, :])))


class SecondEmbedder:
    """Finer patch grid, random projection and tanh; seeded independently of the encoders."""

    def __init__(self, grid: int = 8, channels: int = 3, width: int = 64, seed: int = 4321):
        rng = RngStream(seed).child("second_embedder")
        n_in = grid * grid * channels
        self.grid = grid
        self.weight = rng.normal((n_in, width), np.float64) / np.sqrt(n_in)
        self.bias = rng.normal((width,), np.float64) * 0.05

    def __call__(self, image: np.ndarray) -> np.ndarray:
        cells = grid_means(np.asarray(image, dtype=np.float64), self.grid)
        flat = cells.reshape(cells.shape[:-3] + (-1,))
        return np.tanh(2.0 * (flat @ self.weight)) + self.bias


@dataclass
class Scorer:
    encoders: FrozenEncoders
    second: SecondEmbedder = field(default_factory=SecondEmbedder)

    @classmethod
    def default(cls, config: EncoderConfig | None = None) -> Scorer:
        return cls(FrozenEncoders(config or EncoderConfig()))

    def clip_text_score(self, frames: np.ndarray, tokens: TextTokenSeq) -> float:
        return frame_average(self.encoders.encode_image_coarse(frames), self.encoders.pooled_text(tokens))

    def clip_image_score(self, frames: np.ndarray, prompt_image: np.ndarray) -> float:
        return frame_average(self.encoders.encode_image_coarse(frames), self.encoders.encode_image_coarse(prompt_image))

    def dino_like_score(self, frames: np.ndarray, prompt_image: np.ndarray) -> float:
        return frame_average(self.second(frames), self.second(prompt_image))

    def score_clip(self, frames, tokens, prompt_image) -> dict[str, float]:
        return {"clip_text": self.clip_text_score(frames, tokens),
                "clip_image": self.clip_image_score(frames, prompt_image),
                "dino": self.dino_like_score(frames, prompt_image)}

    def config_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.encoders.image_weight, self.encoders.text_to_joint, self.second.weight, self.second.bias):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass
class MetricReport:
    model: str
    clip_ids: list[str]
    per_clip: list[dict[str, float]]
    embedder_hash: str

    @property
    def count(self) -> int:
        return len(self.per_clip)

    def aggregate(self) -> dict[str, float]:
        if not self.per_clip:
            return {m: float("nan") for m in METRICS}
        return {m: float(np.mean([row[m] for row in self.per_clip])) for m in METRICS}

    def records(self) -> list[dict]:
        rows = [{"model": self.model, "clip_id": cid, **vals} for cid, vals in zip(self.clip_ids, self.per_clip)]
        rows.append({"model": self.model, "clip_id": "__mean__", "count": self.count,
                     "embedder": self.embedder_hash, **self.aggregate()})
        return rows


def format_table(reports: Sequence[MetricReport]) -> str:
    header = f"{'model':<24} {'clips':>5} {'CLIP-Text':>10} {'CLIP-Image':>11} {'DINO-like':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        agg = r.aggregate()
        lines.append(f"{r.model:<24} {r.count:>5} {agg['clip_text']:>10.4f} {agg['clip_image']:>11.4f} {agg['dino']:>10.4f}")
    return "\n".join(lines)


def tally_table(votes: dict[str, Sequence[int]]) -> str:
    """Percentage table for preference tallies, e.g. ``{"ours": [12, 30]}`` per question."""
    lines = []
    totals = [sum(col) for col in zip(*votes.values())] if votes else []
    for name, counts in votes.items():
        pct = [100.0 * c / t if t else 0.0 for c, t in zip(counts, totals)]
        lines.append(f"{name:<16} " + " ".join(f"{p:6.2f}%" for p in pct))
    return "\n".join(lines)


def write_jsonl(path, reports: Sequence[MetricReport]) -> None:
    rows = [json.dumps(row, sort_keys=True) for r in reports for row in r.records()]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


# -- frame dumps -------------------------------------------------------------------------


def to_bytes(pixels: np.ndarray) -> np.ndarray:
    """Signed intensities in ``[-1, 1]`` to 8-bit values."""
    return np.clip(np.round((np.asarray(pixels) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def frame_grid(frames: np.ndarray, pad: int = 1) -> np.ndarray:
    """Lay ``[F, H, W, 3]`` frames out left to right with ``pad`` pixel gaps."""
    F, H, W, C = frames.shape
    out = np.full((H, F * W + (F - 1) * pad, C), -1.0)
    for f in range(F):
        out[:, f * (W + pad) : f * (W + pad) + W] = frames[f]
    return out


def ppm_bytes(image: np.ndarray) -> bytes:
    img = to_bytes(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"PPM needs [H, W, 3], got {img.shape}")
    return f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes()


def read_ppm(buf: bytes) -> np.ndarray:
    """Binary PPM (P6, maxval 255) to signed intensities ``[H, W, 3]`` in ``[-1, 1]``."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DimensionError("truncated PPM header")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DimensionError("only binary 8-bit PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = np.frombuffer(buf, dtype=np.uint8, offset=pos + 1)
    if body.size < w * h * 3:
        raise DimensionError("truncated PPM payload")
    return body[: w * h * 3].reshape(h, w, 3).astype(np.float64) / 127.5 - 1.0
