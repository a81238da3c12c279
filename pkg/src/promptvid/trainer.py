"""Stage plans, parameter gating, Adam, the denoising train step and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import ParameterStore, RngStream, Tensor, serialize
from .autodiff.params import TAGS, tensor_digest
from .conditioning import EncoderConfig
from .diffusion import epsilon_loss, forward_noise
from .errors import DataError, DimensionError, NonFiniteError, PlanError, StateError, VersionError
from .injection import sync_injection_projections
from .model import ModelConfig, PromptBundle, PromptVideoModel, ScheduleConfig
from .unet import UNetConfig

log = logging.getLogger(__name__)

STAGES = ("pretrain", "stage1", "stage2", "unified", "refiner")

# stage -> (trainable tags, conditioning mode)
STAGE_DEFAULTS = {
    "pretrain": (("base", "stage1"), "text"),
    "stage1": (("stage1",), "coarse"),
    "stage2": (("stage2",), "full"),
    "unified": (("stage1", "stage2"), "full"),
    "refiner": (("refiner",), "full"),
}


@dataclass
class StagePlan:
    stage: str
    steps: int = 100
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    tags: tuple[str, ...] | None = None  # default from the stage
    extra_names: tuple[str, ...] = ()  # individual tensors trained in addition to the tags
    mode: str | None = None
    value_recursion: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise PlanError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        tags, mode = STAGE_DEFAULTS[self.stage]
        if self.tags is None:
            self.tags = tags
        if self.mode is None:
            self.mode = mode
        if self.stage == "refiner" and not self.extra_names:
            self.extra_names = ("conv_out.weight", "conv_out.bias")
        for t in self.tags:
            if t not in TAGS:
                raise PlanError(f"unknown parameter tag {t!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise PlanError(f"need steps >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tags"], d["extra_names"] = list(self.tags), list(self.extra_names)
        return d


def text_kv_names(store: ParameterStore) -> tuple[str, ...]:
    return tuple(n for n in store.names(["stage1"]) if ".text.to_" in n)


def select_trainable(store: ParameterStore, plan: StagePlan) -> list[str]:
    """Names selected by the plan; sets ``requires_grad`` on exactly those tensors."""
    for name in plan.extra_names:
        if name not in store:
            raise PlanError(f"plan names unknown tensor {name!r}")
    if "frozen" in plan.tags:
        raise PlanError("the frozen tag can never be trained")
    chosen = set(store.names(plan.tags)) | set(plan.extra_names)
    out = []
    for name, tensor, tag in store.items():
        tensor.requires_grad = name in chosen and tag != "frozen"
        if tensor.requires_grad:
            out.append(name)
    return out


# -- Adam --------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam step, in place; parameters without a gradient are left untouched."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise DimensionError(f"{name}: optimizer state shape {m.shape} != parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if lr:
            p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# -- training -------------------------------------------------------------------------


@dataclass
class TrainItem:
    latent: np.ndarray  # [F, C, H, W]
    bundle: PromptBundle
    target: np.ndarray | None = None  # clean latent when it differs from ``latent``


class Trainer:
    """Owns one plan's optimisation run over a fixed list of items."""

    def __init__(self, model: PromptVideoModel, items: Sequence[TrainItem], plan: StagePlan,
                 fixed_noise: bool = False):
        if not items and plan.steps:
            raise DataError("no training items")
        self.model, self.items, self.plan = model, list(items), plan
        self.names = select_trainable(model.store, plan)
        self.params = {n: model.store[n] for n in self.names}
        self.adam = AdamState()
        root = RngStream(plan.seed).child(f"train/{plan.stage}")
        self.batch_rng, self.noise_rng = root.child("batches"), root.child("noise")
        self.fixed_noise = fixed_noise
        self._fixed = None
        self.step_index = 0
        self.losses: list[float] = []

    def _draw(self, batch: list[TrainItem]):
        cfg, T = self.model.config.unet, self.model.schedule.T_steps
        B = len(batch)
        dt = ad.get_default_dtype()
        t = self.noise_rng.integers(1, T + 1, size=B)
        eps = self.noise_rng.normal((B, cfg.frames, cfg.in_channels, cfg.height, cfg.width), dt)
        eps_prompt = self.noise_rng.normal((B, cfg.in_channels, cfg.height, cfg.width), dt)
        return t, eps, eps_prompt

    def next_batch(self) -> list[TrainItem]:
        idx = self.batch_rng.integers(0, len(self.items), size=min(self.plan.batch_size, len(self.items)))
        return [self.items[int(i)] for i in idx]

    def train_step(self, batch: list[TrainItem] | None = None) -> float:
        batch = batch if batch is not None else self.next_batch()
        if self.fixed_noise:
            if self._fixed is None:
                self._fixed = self._draw(batch)
            t, eps, eps_prompt = self._fixed
        else:
            t, eps, eps_prompt = self._draw(batch)
        dt = ad.get_default_dtype()
        x0 = np.stack([(it.target if it.target is not None else it.latent) for it in batch]).astype(dt)
        x_t = forward_noise(self.model.schedule, x0, t, eps)
        for p in self.params.values():
            p.grad = None
        try:
            pred = self.model.predict_eps(x_t, t, [it.bundle for it in batch], self.plan.mode, eps_prompt,
                                          value_recursion=self.plan.value_recursion)
            loss = epsilon_loss(pred, eps)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError("loss is not finite")
            if self.names and loss.requires_grad:
                ad.backward(loss)
        except NonFiniteError as exc:
            raise NonFiniteError(f"training aborted at step {self.step_index} of {self.plan.stage} "
                                 f"(t={t.tolist()}, lr={self.plan.lr}): {exc}") from None
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_update(self.params, grads, self.adam, self.plan.lr)
        self.step_index += 1
        self.losses.append(value)
        return value

    def run(self, steps: int | None = None, log_every: int = 0) -> list[float]:
        steps = self.plan.steps if steps is None else steps
        for _ in range(steps):
            loss = self.train_step()
            if log_every and self.step_index % log_every == 0:
                recent = self.losses[-log_every:]
                log.info("%s step %d loss %.5f", self.plan.stage, self.step_index, float(np.mean(recent)))
        return self.losses


def items_from_records(model: PromptVideoModel, records, use_clean_target: bool = False) -> list[TrainItem]:
    items = []
    dt = ad.get_default_dtype()
    for rec in records:
        latent = model.video_latent(rec.video).astype(dt)
        target = None
        if use_clean_target and rec.clean_video is not None:
            target = model.video_latent(rec.clean_video).astype(dt)
        items.append(TrainItem(latent, model.bundle_for_record(rec), target))
    return items


def run_stage(model: PromptVideoModel, items: Sequence[TrainItem], plan: StagePlan, log_every: int = 0,
              provenance: list | None = None) -> list[float]:
    """Train one stage and append its provenance entry; pretraining ends by re-syncing injection copies."""
    before = model.store.digest()
    trainer = Trainer(model, items, plan)
    losses = trainer.run(log_every=log_every)
    if plan.stage == "pretrain":
        sync_injection_projections(model.store, model.unet.site_names)
    for _, t, _ in model.store.items():
        t.requires_grad = True
    if provenance is not None:
        provenance.append({"stage": plan.stage, "plan": plan.to_dict(), "input_digest": before,
                           "output_digest": model.store.digest(),
                           "final_loss": float(np.mean(losses[-20:])) if losses else None})
    return losses


# -- checkpoints ---------------------------------------------------------------------------

CKPT_MAGIC = b"PVCK"
CKPT_VERSION = 1


def model_config_from_dict(d: dict) -> ModelConfig:
    def tup(x):
        return tuple(x) if isinstance(x, list) else x

    unet = UNetConfig(**{k: tup(v) for k, v in d["unet"].items()})
    enc = EncoderConfig(**{k: tup(v) for k, v in d["encoder"].items()})
    sched = ScheduleConfig(**d["schedule"])
    widths = d.get("refiner_widths")
    return ModelConfig(unet, enc, sched, tuple(widths) if widths is not None else None, d.get("init_seed", 0))


@dataclass
class CheckpointInfo:
    header: dict

    @property
    def provenance(self) -> list[dict]:
        return self.header["provenance"]

    @property
    def stages(self) -> list[str]:
        return [p["stage"] for p in self.provenance]


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(model: PromptVideoModel, provenance: list[dict], seeds: dict | None = None,
                     stage1_ancestor: str | None = None, flags: dict | None = None) -> bytes:
    store = model.store
    header = {
        "format": "promptvid-checkpoint", "version": CKPT_VERSION, "artifact_version": __version__,
        "config": model.config.to_dict(), "config_hash": model.config.digest(),
        "schedule": model.schedule.params(), "provenance": provenance, "seeds": seeds or {},
        "stage1_ancestor": stage1_ancestor, "flags": flags or {},
        "params": [{"name": n, "tag": tag, "sha256": tensor_digest(t.data)} for n, t, tag in store.items()],
        "digest": store.digest(),
    }
    head = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(head)), head]
    parts += [serialize.dumps(t.data) for _, t, _ in store.items()]
    return b"".join(parts)


def save_checkpoint(path, model: PromptVideoModel, provenance: list[dict], **kw) -> str:
    atomic_write(path, checkpoint_bytes(model, provenance, **kw))
    return model.store.digest()


def read_header(buf: bytes) -> tuple[dict, int]:
    if buf[:4] != CKPT_MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    start = 4 + struct.calcsize("<IQ")
    return json.loads(buf[start : start + n].decode()), start + n


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[PromptVideoModel, CheckpointInfo]:
    """Rebuild the model from a checkpoint; ``expected`` must hash-match the stored configuration."""
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint {path} does not exist")
    buf = path.read_bytes()
    header, pos = read_header(buf)
    config = model_config_from_dict(header["config"])
    if config.digest() != header["config_hash"]:
        raise VersionError("checkpoint config does not match its recorded hash")
    if expected is not None:
        if expected.digest() != header["config_hash"]:
            raise VersionError(f"checkpoint config hash {header['config_hash']} != run config {expected.digest()}")
    model = PromptVideoModel(config, build=False)
    if model.schedule.params() != header["schedule"]:
        raise VersionError(f"checkpoint schedule {header['schedule']} != {model.schedule.params()}")
    store = model.store
    for entry in header["params"]:
        arr, pos = serialize.loads(buf, pos)
        store.add(entry["name"], arr, entry["tag"])
    if store.digest() != header["digest"]:
        raise DataError("checkpoint payload does not match its digest")
    return model, CheckpointInfo(header)


def tag_digests(store: ParameterStore) -> dict[str, str]:
    """One combined hash per tag (plus the text cross-attention K/V group)."""
    import hashlib

    groups: dict[str, list[str]] = {}
    for name, _, tag in store.items():
        groups.setdefault(tag, []).append(name)
    groups["text_kv"] = list(text_kv_names(store))
    out = {}
    for g, names in sorted(groups.items()):
        h = hashlib.sha256()
        for n in sorted(names):
            h.update(n.encode() + tensor_digest(store[n].data).encode())
        out[g] = h.hexdigest()
    return out
