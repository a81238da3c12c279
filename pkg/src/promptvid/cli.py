"""Command-line entry point: ``promptvid {datagen,train,sample,eval,inspect}``.

Runs are configured by an INI file (see ``RunConfig``); unknown sections
or keys are rejected, and every command writes the fully resolved
configuration next to its outputs so the run can be replayed from it.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .autodiff import serialize
from .conditioning import EncoderConfig
from .dataset import (FilterRules, SynthConfig, filter_records, load_clip_store, parse_manifest,
                      save_clip_store, split_manifest, synth_generate, verdict_counts)
from .diffusion import sample_video
from .errors import ConfigError, DataError, PromptVidError, StateError
from .metrics import MetricReport, Scorer, format_table, frame_grid, ppm_bytes, read_ppm, write_jsonl
from .model import ModelConfig, PromptVideoModel, ScheduleConfig
from .trainer import (StagePlan, atomic_write, items_from_records, load_checkpoint, run_stage, save_checkpoint,
                      tag_digests, text_kv_names)
from .unet import UNetConfig

log = logging.getLogger("promptvid")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _words(s: str) -> tuple[str, ...]:
    return tuple(s.replace(",", " ").split())


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_ints(s: str):
    return None if s.strip().lower() in ("", "none", "default") else _ints(s)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return " ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "in_channels": (int, 4), "base_channels": (int, 16), "channel_multipliers": (_ints, (1, 2, 4)),
        "frames": (int, 8), "height": (int, 32), "width": (int, 32), "attention_levels": (_ints, (1, 2)),
        "head_dim": (int, 8), "norm_groups": (int, 4), "temb_dim": (int, 32), "temporal_kernel": (int, 1),
        "patch_size": (int, 2), "refiner_widths": (_opt_ints, None), "init_seed": (int, 0),
    },
    "encoder": {
        "d_txt": (int, 32), "image_patch": (int, 4), "d_img": (int, 32), "mapper_hidden_widths": (_opt_ints, None),
        "max_tokens": (int, 16), "frozen_seed": (int, 1234),
    },
    "schedule": {"T_steps": (int, 100), "beta_start": (float, 1e-4), "beta_end": (float, 2e-2)},
    "data": {
        "n_clips": (int, 512), "seed": (int, 0), "test_count": (int, 32), "min_ratio": (float, 0.05),
        "max_ratio": (float, 0.85), "keywords": (_words, ("dog", "cat", "bear", "car", "panda", "tiger", "horse",
                                                          "elephant", "lion")),
        "ratio_range": (_floats, (0.03, 0.5)), "extra_class_fraction": (float, 0.0), "watermark": (_bool, False),
    },
    "train": {
        "pretrain_steps": (int, 2000), "stage1_steps": (int, 2000), "stage2_steps": (int, 1000),
        "unified_steps": (int, 3000), "refiner_steps": (int, 500), "batch_size": (int, 4), "lr": (float, 1e-4),
        "pretrain_lr": (float, 1e-3), "seed": (int, 0), "unfreeze_text_kv": (_bool, False), "log_every": (int, 50),
    },
    "sample": {"steps": (int, 25), "seed": (int, 0)},
    "flags": {
        "injection": (_bool, True), "value_recursion": (_bool, False), "unified_training": (_bool, False),
        "watermark_removal": (_bool, False), "fresh_prompt_noise": (_bool, False),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict]

    @classmethod
    def parse(cls, text: str) -> RunConfig:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, raw in cp.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"unknown config key {key!r} in [{sec}]")
                try:
                    values[sec][key] = SCHEMA[sec][key][0](raw)
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {key}: {exc}") from None
        return cls(values)

    @classmethod
    def load(cls, path) -> RunConfig:
        if path is None:
            return cls.parse("")
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        return cls.parse(p.read_text(encoding="utf-8"))

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def resolved_text(self) -> str:
        out = io.StringIO()
        out.write(f"# resolved configuration (promptvid {__version__})\n")
        for sec, keys in SCHEMA.items():
            out.write(f"\n[{sec}]\n")
            for k in keys:
                out.write(f"{k} = {_fmt(self.values[sec][k])}\n")
        return out.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        m, e, s = self["model"], self["encoder"], self["schedule"]
        unet = UNetConfig(in_channels=m["in_channels"], base_channels=m["base_channels"],
                          channel_multipliers=m["channel_multipliers"], frames=m["frames"], height=m["height"],
                          width=m["width"], attention_levels=m["attention_levels"], head_dim=m["head_dim"],
                          norm_groups=m["norm_groups"], temb_dim=m["temb_dim"], cond_dim=e["d_txt"],
                          temporal_kernel=m["temporal_kernel"], patch_size=m["patch_size"])
        enc = EncoderConfig(d_txt=e["d_txt"], image_patch=e["image_patch"], d_img=e["d_img"],
                            mapper_hidden_widths=e["mapper_hidden_widths"], max_tokens=e["max_tokens"],
                            frozen_seed=e["frozen_seed"])
        return ModelConfig(unet, enc, ScheduleConfig(**s), m["refiner_widths"], m["init_seed"])

    def synth_config(self) -> SynthConfig:
        d, m = self["data"], self["model"]
        return SynthConfig(frames=m["frames"], size=m["height"], ratio_range=tuple(d["ratio_range"]),
                           extra_class_fraction=d["extra_class_fraction"], watermark=d["watermark"])

    def filter_rules(self) -> FilterRules:
        d = self["data"]
        return FilterRules(d["min_ratio"], d["max_ratio"], tuple(d["keywords"]))


def write_resolved(cfg: RunConfig, path) -> None:
    atomic_write(path, cfg.resolved_text().encode())


def _resolved_path(out: Path) -> Path:
    return out.with_name(out.name + ".resolved.ini")


# -- commands ---------------------------------------------------------------------------------


def cmd_datagen(cfg: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    d = cfg["data"]
    records = synth_generate(d["n_clips"], d["seed"], cfg.synth_config())
    filter_records(records, cfg.filter_rules())
    manifest = split_manifest(records, d["test_count"], d["seed"])
    manifest.meta.update({"n_clips": d["n_clips"], "config_hash": cfg.digest(), "verdicts": dict(verdict_counts(records))})
    save_clip_store(out / "clips", manifest.records)
    atomic_write(out / "manifest.jsonl", manifest.to_jsonl().encode())
    write_resolved(cfg, out / "resolved.ini")
    counts = {"generated": len(records), "kept": len(manifest.records), **manifest.counts()}
    log.info("datagen seed=%d config=%s manifest=%s %s", d["seed"], cfg.digest(), manifest.digest()[:16], counts)
    return counts


def _load_data(data_dir, split: str | None = None):
    d = Path(data_dir)
    mpath = d / "manifest.jsonl"
    if not mpath.exists():
        raise DataError(f"no manifest at {mpath}")
    manifest = parse_manifest(mpath.read_text(encoding="utf-8"))
    load_clip_store(d / "clips", manifest)
    return manifest.split(split) if split else manifest.records


def cmd_train(cfg: RunConfig, stage: str, data_dir, out_ckpt, in_ckpt=None) -> str:
    t, flags = cfg["train"], cfg["flags"]
    if stage == "unified" and not flags["unified_training"]:
        raise ConfigError("unified training must be requested with [flags] unified_training = true")
    expected = cfg.model_config()
    if in_ckpt is not None:
        model, info = load_checkpoint(in_ckpt, expected)
        provenance = list(info.provenance)
        ancestor = info.header.get("stage1_ancestor")
        if stage == "stage2" and info.stages and info.stages[-1] == "stage1":
            ancestor = info.header["digest"]
    else:
        if stage not in ("pretrain", "unified", "stage1"):
            raise StateError(f"stage {stage} needs an input checkpoint")
        model, provenance, ancestor = PromptVideoModel(expected), [], None
    if stage == "stage2" and not any(s in ("stage1",) for s in [p["stage"] for p in provenance]):
        raise StateError("stage2 needs a checkpoint that went through stage1")
    if stage == "refiner":
        if expected.refiner_widths is None:
            raise ConfigError("refiner training needs [model] refiner_widths")
        model.set_watermark_removal(True)
    lr = t["pretrain_lr"] if stage == "pretrain" else t["lr"]
    extra = text_kv_names(model.store) if (stage == "stage2" and t["unfreeze_text_kv"]) else ()
    plan = StagePlan(stage, t[f"{stage}_steps"], t["batch_size"], lr, t["seed"], extra_names=extra,
                     mode=None if flags["injection"] or stage in ("pretrain", "stage1") else "coarse",
                     value_recursion=flags["value_recursion"])
    records = _load_data(data_dir, "train")
    items = items_from_records(model, records, use_clean_target=stage == "refiner")
    log.info("train stage=%s seed=%d config=%s version=%s items=%d", stage, t["seed"], expected.digest(),
             __version__, len(items))
    run_stage(model, items, plan, t["log_every"], provenance)
    out = Path(out_ckpt)
    digest = save_checkpoint(out, model, provenance, seeds={"train": t["seed"], "init": expected.init_seed},
                             stage1_ancestor=ancestor, flags=dict(flags))
    write_resolved(cfg, _resolved_path(out))
    log.info("wrote %s digest=%s", out, digest[:16])
    return digest


def default_mode(stages: list[str]) -> str:
    if not stages or stages[-1] == "pretrain":
        return "text"
    if stages[-1] == "stage1":
        return "coarse"
    return "full"


def _load_prompt_image(path, size: int) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise DataError(f"prompt image {p} does not exist")
    buf = p.read_bytes()
    img = read_ppm(buf) if buf[:2] == b"P6" else serialize.loads(buf)[0].astype(np.float64)
    if img.shape != (size, size, 3):
        raise DataError(f"prompt image must be {size}x{size}x3, got {img.shape}")
    return img


def _model_for_run(cfg: RunConfig, ckpt) -> tuple[PromptVideoModel, str]:
    model, info = load_checkpoint(ckpt, cfg.model_config())
    if cfg["flags"]["watermark_removal"]:
        model.set_watermark_removal(True)
    mode = default_mode(info.stages)
    if mode == "full" and not cfg["flags"]["injection"]:
        mode = "coarse"
    return model, mode


def cmd_sample(cfg: RunConfig, ckpt, prompt_image, caption: str, seed: int | None, out_dir) -> dict:
    s, flags = cfg["sample"], cfg["flags"]
    seed = s["seed"] if seed is None else seed
    model, mode = _model_for_run(cfg, ckpt)
    bundle = model.make_bundle(caption, _load_prompt_image(prompt_image, model.config.unet.height))
    z = sample_video(model, bundle, seed, s["steps"], mode=mode, fresh_prompt_noise=flags["fresh_prompt_noise"],
                     value_recursion=flags["value_recursion"])
    frames = model.codec.decode(z)
    out = Path(out_dir)
    latent_bytes = serialize.dumps(z)
    grid_bytes = ppm_bytes(frame_grid(frames))
    atomic_write(out / "latent.pvt", latent_bytes)
    atomic_write(out / "frames.ppm", grid_bytes)
    write_resolved(cfg, out / "resolved.ini")
    result = {"seed": seed, "mode": mode, "latent_sha256": hashlib.sha256(latent_bytes).hexdigest(),
              "frames_sha256": hashlib.sha256(grid_bytes).hexdigest()}
    log.info("sample seed=%d config=%s version=%s %s", seed, model.config.digest(), __version__, result)
    return result


def evaluate(model: PromptVideoModel, records, mode: str, seed: int, steps: int, name: str,
             batch: int = 32, emit_dir=None, fresh_prompt_noise: bool = False) -> MetricReport:
    scorer = Scorer(model.encoders)
    bundles = [model.bundle_for_record(r) for r in records]
    rows = []
    for start in range(0, len(bundles), batch):
        chunk = bundles[start : start + batch]
        z = sample_video(model, chunk, seed + start, steps, mode=mode, fresh_prompt_noise=fresh_prompt_noise)
        frames = model.codec.decode(z)
        for i, b in enumerate(chunk):
            rows.append(scorer.score_clip(frames[i], b.tokens, b.prompt_image))
            if emit_dir is not None:
                rec = records[start + i]
                atomic_write(Path(emit_dir) / f"{name}.{rec.clip_id}.ppm", ppm_bytes(frame_grid(frames[i])))
    return MetricReport(name, [r.clip_id for r in records], rows, scorer.config_hash())


def cmd_eval(cfg: RunConfig, ckpts, data_dir, out_dir, modes=None, emit_frames=None) -> list[MetricReport]:
    records = _load_data(data_dir, "test")
    if not records:
        raise DataError("test split is empty")
    s = cfg["sample"]
    reports = []
    for i, ck in enumerate(ckpts):
        model, mode = _model_for_run(cfg, ck)
        if modes:
            mode = modes[i]
        name = f"{Path(ck).stem}:{mode}"
        reports.append(evaluate(model, records, mode, s["seed"], s["steps"], name, emit_dir=emit_frames,
                                fresh_prompt_noise=cfg["flags"]["fresh_prompt_noise"]))
    out = Path(out_dir)
    table = format_table(reports)
    atomic_write(out / "report.txt", (table + "\n").encode())
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "report.jsonl", reports)
    write_resolved(cfg, out / "resolved.ini")
    print(table)
    return reports


def cmd_inspect(ckpt) -> dict:
    model, info = load_checkpoint(ckpt)
    h = info.header
    counts: dict[str, list[int]] = {}
    for _, t, tag in model.store.items():
        c = counts.setdefault(tag, [0, 0])
        c[0] += 1
        c[1] += t.size
    summary = {
        "artifact_version": h["artifact_version"], "config_hash": h["config_hash"], "digest": h["digest"],
        "stages": info.stages, "stage1_ancestor": h["stage1_ancestor"], "seeds": h["seeds"], "flags": h["flags"],
        "tags": {tag: {"tensors": c[0], "values": c[1]} for tag, c in counts.items()},
        "tag_digests": tag_digests(model.store),
    }
    return summary


# -- argument parsing ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptvid", description="Image-prompted toy video diffusion.")
    p.add_argument("--version", action="version", version=f"promptvid {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("datagen", help="generate, curate and split a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--stage", required=True, choices=("pretrain", "stage1", "stage2", "unified", "refiner"))
    t.add_argument("--data", required=True)
    t.add_argument("--in-ckpt", "--resume", dest="in_ckpt")
    t.add_argument("--out", required=True)

    s = sub.add_parser("sample", help="sample one video")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt-image", required=True, help="P6 PPM or tensor blob, [H, W, 3]")
    s.add_argument("--caption", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--watermark-removal", choices=("on", "off"))
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score checkpoints on the test split")
    e.add_argument("--config")
    e.add_argument("--ckpt", action="append", required=True)
    e.add_argument("--mode", action="append", choices=("text", "coarse", "full"))
    e.add_argument("--data", required=True)
    e.add_argument("--emit-frames")
    e.add_argument("--out", required=True)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("ckpt")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "inspect":
            print(json.dumps(cmd_inspect(args.ckpt), indent=2, sort_keys=True))
            return 0
        cfg = RunConfig.load(args.config)
        if args.command == "datagen":
            print(json.dumps(cmd_datagen(cfg, args.out), sort_keys=True))
        elif args.command == "train":
            print(cmd_train(cfg, args.stage, args.data, args.out, args.in_ckpt))
        elif args.command == "sample":
            if args.watermark_removal:
                cfg["flags"]["watermark_removal"] = args.watermark_removal == "on"
            print(json.dumps(cmd_sample(cfg, args.ckpt, args.prompt_image, args.caption, args.seed, args.out),
                             sort_keys=True))
        elif args.command == "eval":
            if args.mode and len(args.mode) != len(args.ckpt):
                raise ConfigError("give either no --mode or one per --ckpt")
            cmd_eval(cfg, args.ckpt, args.data, args.out, args.mode, args.emit_frames)
    except PromptVidError as exc:
        print(f"promptvid: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
