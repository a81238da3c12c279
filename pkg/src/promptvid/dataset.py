"""Synthetic clip generator and the curation protocol applied to it.

Clips show one textured subject shape drifting over a faint textured
background. Pixel values are signed intensities in roughly ``[-1, 1]`` with
the background close to 0, so a "clean background" prompt image is simply
zero outside the subject mask.

Curation mirrors the real pipeline: segment the subject in the first frame
(exact here, by construction), parse the caption's subject noun chunk,
filter by mask-area ratio and class keyword, derive the background-cleared
prompt image, then split the kept clips into train and test sets.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import RngStream
from .conditioning import split_words
from .errors import DataError, ExtractionError, ParseError, SplitError, VersionError
from .lexicon import CAPTION_ADJECTIVES, DETERMINERS, MODIFIERS, NOUNS, SUBJECT_CLASSES, VERB_PHRASES

VERDICTS = ("kept", "too_small", "too_large", "class_rejected")

# Each class is rendered as its own shape so that class identity is visible in the pixels.
CLASS_SHAPES = {
    "dog": "disk", "cat": "triangle", "bear": "square", "car": "wide_rect", "panda": "diamond",
    "tiger": "wide_ellipse", "horse": "tall_ellipse", "elephant": "tall_rect", "lion": "cross",
    "bird": "disk", "boat": "wide_rect", "tree": "triangle", "house": "square", "person": "tall_rect",
    "rabbit": "diamond",
}


# -- records -------------------------------------------------------------------


@dataclass
class ClipRecord:
    clip_id: str
    caption: str
    subject_class: str
    area_ratio: float
    video: np.ndarray | None = None  # [F, H, W, 3]
    subject_mask: np.ndarray | None = None  # [H, W] bool, first frame
    verdict: str | None = None
    span: tuple[int, int] | None = None
    split: str | None = None
    clean_video: np.ndarray | None = None  # set when a watermark was stamped

    def summary(self) -> dict:
        return {
            "clip_id": self.clip_id, "caption": self.caption,
            "span": list(self.span) if self.span is not None else None,
            "class": self.subject_class, "area_ratio": round(float(self.area_ratio), 8),
            "verdict": self.verdict, "split": self.split,
        }


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 8
    size: int = 32
    classes: tuple[str, ...] = SUBJECT_CLASSES
    extra_class_fraction: float = 0.0  # share of clips drawn from non-keyword nouns
    ratio_range: tuple[float, float] = (0.03, 0.5)  # target area ratio, log-uniform
    speed: float = 1.0  # pixels per frame
    texture_amplitude: float = 0.25
    background_amplitude: float = 0.12
    watermark: bool = False

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


# -- shape rasterisation ----------------------------------------------------------------


def shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    """Pixel-centre rasterisation of a shape of characteristic radius ``r``."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dx**2 + dy**2 <= r**2
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "wide_rect":
        return (np.abs(dx) <= 1.4 * r) & (np.abs(dy) <= 0.7 * r)
    if kind == "tall_rect":
        return (np.abs(dx) <= 0.7 * r) & (np.abs(dy) <= 1.4 * r)
    if kind == "diamond":
        return np.abs(dx) / r + np.abs(dy) / r <= 1.0
    if kind == "wide_ellipse":
        return (dx / (1.4 * r)) ** 2 + (dy / (0.7 * r)) ** 2 <= 1.0
    if kind == "tall_ellipse":
        return (dx / (0.7 * r)) ** 2 + (dy / (1.4 * r)) ** 2 <= 1.0
    if kind == "triangle":
        # Apex at (cy - r, cx), base of width 2r at cy + r.
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    if kind == "cross":
        arm = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    raise DataError(f"unknown shape {kind!r}")


def shape_area(kind: str, r: float) -> float:
    return {
        "disk": np.pi * r * r, "square": 4 * r * r, "wide_rect": 3.92 * r * r, "tall_rect": 3.92 * r * r,
        "diamond": 2 * r * r, "wide_ellipse": np.pi * 0.98 * r * r, "tall_ellipse": np.pi * 0.98 * r * r,
        "triangle": 2 * r * r, "cross": 4 * r * r * (2 / 3) - (2 * r / 3) ** 2,
    }[kind]


def shape_perimeter(kind: str, r: float) -> float:
    if kind in ("wide_ellipse", "tall_ellipse"):
        a, b = 1.4 * r, 0.7 * r  # Ramanujan's approximation
        return float(np.pi * (3 * (a + b) - np.sqrt((3 * a + b) * (a + 3 * b))))
    return {
        "disk": 2 * np.pi * r, "square": 8 * r, "wide_rect": 8.4 * r, "tall_rect": 8.4 * r,
        "diamond": 4 * np.sqrt(2) * r, "triangle": 2 * r + 2 * np.sqrt(r * r + 4 * r * r), "cross": 8 * r,
    }[kind]


def _smooth_noise(rng: RngStream, size: int, cells: int, channels: int) -> np.ndarray:
    coarse = rng.normal((cells, cells, channels), np.float64)
    rep = -(-size // cells)
    return np.repeat(np.repeat(coarse, rep, axis=0), rep, axis=1)[:size, :size]


_GLYPH = np.array([
    [1, 0, 0, 0, 1],
    [1, 0, 0, 0, 1],
    [1, 0, 1, 0, 1],
    [1, 0, 1, 0, 1],
    [0, 1, 0, 1, 0],
], dtype=bool)


def stamp_watermark(video: np.ndarray, alpha: float = 0.5, value: float = 0.9) -> np.ndarray:
    """Blend a fixed glyph into the bottom-right corner of every frame."""
    out = video.copy()
    gh, gw = _GLYPH.shape
    H, W = video.shape[1:3]
    region = out[:, H - gh - 1 : H - 1, W - gw - 1 : W - 1]
    region[:, _GLYPH] = (1 - alpha) * region[:, _GLYPH] + alpha * value
    return out


def _render_clip(rng: RngStream, cls: str, cfg: SynthConfig):
    size, F = cfg.size, cfg.frames
    kind = CLASS_SHAPES[cls]
    lo, hi = np.log(cfg.ratio_range[0]), np.log(cfg.ratio_range[1])
    ratio = float(np.exp(rng.uniform(None, lo, hi)))
    r = float(np.sqrt(ratio * size * size / shape_area(kind, 1.0)))
    verb = rng.choice(list(VERB_PHRASES))
    d = np.array(VERB_PHRASES[verb], dtype=np.float64) * cfg.speed
    travel = d * (F - 1)
    # Keep the centre inside the frame for the whole clip.
    span_y = (min(0.0, -travel[1]) + 0.25 * size, size - 0.25 * size - max(0.0, travel[1]))
    span_x = (min(0.0, -travel[0]) + 0.25 * size, size - 0.25 * size - max(0.0, travel[0]))
    cy = float(rng.uniform(None, *span_y))
    cx = float(rng.uniform(None, *span_x))

    colour = rng.uniform(3, -1.0, 1.0)
    colour *= rng.uniform(None, 0.6, 0.9) / max(np.abs(colour).max(), 1e-6)
    angle = float(rng.uniform(None, 0, np.pi))
    freq = float(rng.uniform(None, 0.6, 1.4))
    background = _smooth_noise(rng.child("bg"), size, 8, 3) * cfg.background_amplitude

    video = np.empty((F, size, size, 3))
    first_mask = None
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for f in range(F):
        py, px = cy + d[1] * f, cx + d[0] * f
        m = shape_mask(kind, py, px, r, size)
        # Texture is attached to the subject so it moves with it.
        u = (xx - px) * np.cos(angle) + (yy - py) * np.sin(angle)
        tex = 1.0 + cfg.texture_amplitude * np.sin(freq * u)
        frame = background.copy()
        frame[m] = colour * tex[m, None]
        video[f] = frame
        if f == 0:
            first_mask = m
    adjective = rng.choice(CAPTION_ADJECTIVES)
    caption = f"{adjective} {cls} {verb}"
    return video, first_mask, caption


def synth_generate(n_clips: int, seed: int, config: SynthConfig | None = None) -> list[ClipRecord]:
    cfg = config or SynthConfig()
    root = RngStream(seed).child("synth")
    extras = tuple(n for n in NOUNS if n not in cfg.classes)
    records = []
    for i in range(n_clips):
        rng = root.child(i)
        if extras and rng.uniform() < cfg.extra_class_fraction:
            cls = rng.choice(extras)
        else:
            cls = rng.choice(cfg.classes)
        video, mask, caption = _render_clip(rng, cls, cfg)
        rec = ClipRecord(f"clip{i:05d}", caption, cls, float(mask.mean()), video.astype(np.float32), mask)
        if cfg.watermark:
            rec.clean_video = rec.video
            rec.video = stamp_watermark(video).astype(np.float32)
        records.append(rec)
    return records


# -- caption parsing ---------------------------------------------------------------


@dataclass
class CaptionParse:
    tokens: list[str]
    k: int
    n: int
    head: str

    @property
    def span_words(self) -> list[str]:
        return self.tokens[self.k : self.k + self.n]


def parse_subject_span(caption: str, nouns: Iterable[str] = NOUNS) -> CaptionParse:
    """First noun chunk ``DET? MOD* NOUN`` whose head is a lexicon noun; the span excludes the determiner."""
    nouns = set(nouns)
    words = split_words(caption)
    for i in range(len(words)):
        j = i + 1 if words[i] in DETERMINERS else i
        k = j
        while j < len(words) and words[j] in MODIFIERS and words[j] not in nouns:
            j += 1
        if j < len(words) and words[j] in nouns:
            return CaptionParse(words, k, j - k + 1, words[j])
    raise ParseError(f"no subject noun in caption {caption!r}")


# -- filtering and prompt extraction ---------------------------------------------------


@dataclass(frozen=True)
class FilterRules:
    min_ratio: float = 0.05
    max_ratio: float = 0.85
    keywords: tuple[str, ...] = SUBJECT_CLASSES


def verdict_for(area_ratio: float, head: str | None, rules: FilterRules) -> str:
    if area_ratio < rules.min_ratio:
        return "too_small"
    if area_ratio > rules.max_ratio:
        return "too_large"
    if head is None or head not in rules.keywords:
        return "class_rejected"
    return "kept"


def filter_records(records: Sequence[ClipRecord], rules: FilterRules | None = None) -> list[ClipRecord]:
    """Assign a verdict (and the parsed span) to every record, in place; returns the same list."""
    rules = rules or FilterRules()
    for rec in records:
        try:
            parse = parse_subject_span(rec.caption)
            head, rec.span = parse.head, (parse.k, parse.n)
        except ParseError:
            head, rec.span = None, None
        rec.verdict = verdict_for(rec.area_ratio, head, rules)
    return list(records)


def _resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    ys = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(int)
    xs = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(int)
    return img[ys][:, xs]


def extract_prompt_image(record: ClipRecord, size: int | None = None) -> np.ndarray:
    """Masked first frame on a zero background, cropped to the mask's bounding box and resized (nearest)."""
    if record.subject_mask is None or not record.subject_mask.any():
        raise ExtractionError(f"{record.clip_id}: empty subject mask")
    frame = record.video[0]
    size = size or frame.shape[0]
    mask = record.subject_mask
    cleared = np.where(mask[..., None], frame, 0.0)
    ys, xs = np.nonzero(mask)
    crop = cleared[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
    return _resize_nearest(crop, size).astype(frame.dtype)


# -- splitting and manifests --------------------------------------------------------------

MANIFEST_FORMAT = "promptvid-manifest"
MANIFEST_VERSION = 1
MANIFEST_FIELDS = ("clip_id", "caption", "span", "class", "area_ratio", "verdict", "split")


@dataclass
class Manifest:
    records: list[ClipRecord]
    test_count: int
    seed: int
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> dict:
        return dict(Counter(r.split for r in self.records))

    def to_jsonl(self) -> str:
        head = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "fields": list(MANIFEST_FIELDS),
                "test_count": self.test_count, "seed": self.seed, **self.meta}
        lines = [json.dumps(head, sort_keys=True)]
        lines += [json.dumps(r.summary()) for r in self.records]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()


def split_manifest(records: Sequence[ClipRecord], test_count: int, seed: int) -> Manifest:
    """Seeded shuffle of the kept records; the first ``test_count`` become the test split."""
    kept = [r for r in records if r.verdict == "kept"]
    if test_count < 0 or test_count > len(kept):
        raise SplitError(f"need {test_count} test records but only {len(kept)} were kept")
    order = RngStream(seed).child("split").permutation(len(kept))
    out = []
    for rank, idx in enumerate(order):
        rec = kept[int(idx)]
        rec.split = "test" if rank < test_count else "train"
        out.append(rec)
    out.sort(key=lambda r: r.clip_id)
    return Manifest(out, test_count, seed)


def parse_manifest(text: str) -> Manifest:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError("empty manifest")
    try:
        head = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest line: {exc}") from None
    if head.get("format") != MANIFEST_FORMAT:
        raise DataError("not a manifest file")
    if head.get("version") != MANIFEST_VERSION:
        raise VersionError(f"manifest version {head.get('version')} unsupported")
    recs = []
    for row in rows:
        missing = [f for f in MANIFEST_FIELDS if f not in row]
        if missing:
            raise DataError(f"manifest record missing fields {missing}")
        span = tuple(row["span"]) if row["span"] is not None else None
        recs.append(ClipRecord(row["clip_id"], row["caption"], row["class"], float(row["area_ratio"]),
                               verdict=row["verdict"], span=span, split=row["split"]))
    meta = {k: v for k, v in head.items() if k not in ("format", "version", "fields", "test_count", "seed")}
    return Manifest(recs, int(head.get("test_count", 0)), int(head.get("seed", 0)), meta)


# -- mask bitmaps ----------------------------------------------------------------------------

MASK_MAGIC = b"PVMASK01"


def mask_to_bytes(mask: np.ndarray) -> bytes:
    """16-byte header (8-byte magic, u32 H, u32 W, little-endian) then one byte per pixel."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    return MASK_MAGIC + struct.pack("<II", *mask.shape) + mask.astype(np.uint8).tobytes()


def mask_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:8] != MASK_MAGIC:
        raise DataError("not a mask bitmap (bad magic)")
    h, w = struct.unpack_from("<II", buf, 8)
    body = np.frombuffer(buf, dtype=np.uint8, offset=16)
    if body.size != h * w:
        raise DataError(f"mask payload has {body.size} bytes, header says {h}x{w}")
    if body.max(initial=0) > 1:
        raise DataError("mask bytes must be 0 or 1")
    return body.reshape(h, w).astype(bool)


def ingest_mask(record: ClipRecord, buf: bytes) -> ClipRecord:
    """Attach an externally produced first-frame mask and recompute the area ratio."""
    mask = mask_from_bytes(buf)
    if record.video is not None and mask.shape != record.video.shape[1:3]:
        raise DataError(f"mask {mask.shape} does not match frame size {record.video.shape[1:3]}")
    record.subject_mask = mask
    record.area_ratio = float(mask.mean())
    return record


# -- on-disk clip store ----------------------------------------------------------------------


def save_clip_store(directory, records: Sequence[ClipRecord]) -> None:
    from .autodiff import serialize

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for rec in records:
        serialize.save(d / f"{rec.clip_id}.pvt", rec.video)
        (d / f"{rec.clip_id}.mask").write_bytes(mask_to_bytes(rec.subject_mask))
        if rec.clean_video is not None:
            serialize.save(d / f"{rec.clip_id}.clean.pvt", rec.clean_video)


def load_clip_store(directory, manifest: Manifest) -> list[ClipRecord]:
    from .autodiff import serialize

    d = Path(directory)
    for rec in manifest.records:
        path = d / f"{rec.clip_id}.pvt"
        if not path.exists():
            raise DataError(f"clip store has no video for {rec.clip_id}")
        rec.video = serialize.load(path)
        rec.subject_mask = mask_from_bytes((d / f"{rec.clip_id}.mask").read_bytes())
        clean = d / f"{rec.clip_id}.clean.pvt"
        rec.clean_video = serialize.load(clean) if clean.exists() else None
    return manifest.records


def verdict_counts(records: Iterable[ClipRecord]) -> Counter:
    return Counter(r.verdict for r in records)
