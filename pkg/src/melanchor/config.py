"""Run configuration: one JSON file with per-stage sections, strict key
checking, and a resolved snapshot written next to every run's outputs."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .audio import SynthCorpusSpec
from .augment import AugmentConfig
from .encoder import EncoderConfig
from .masking import MaskSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "corpus": {
        "n_utterances": 200,
        "duration_s": [0.5, 1.0],
        "n_phone_classes": 16,
        "sample_rate": 16000,
        "noise_floor": 0.01,
        "pitch_hz": 100.0,
        "segment_ms": [50, 200],
        "rng_seed": 0,
    },
    "features": {
        "n_mels": 80,
        "frame_len": 400,
        "frame_hop": 320,
    },
    "gmm": {
        "k": 16,
        "epochs": 10,
        "lr_start": 1e-2,
        "lr_end": 1e-4,
        "batch": 256,
        "seed": 0,
        "holdout_frac": 0.1,
    },
    "kmeans": {
        "k": 16,
        "iters": 20,
        "seed": 0,
    },
    "encoder": {
        "frontend": "mel",
        "channels": [8, 16, 32],
        "strides": [4, 4, 2],
        "n_conformer_layers": 2,
        "latent_dim": 32,
        "n_heads": 4,
        "ffn_mult": 4,
        "conv_kernel": 31,
        "rel_pos_buckets": 64,
        "rel_pos_max_dist": 160,
        "daam_gaussians": 2,
        "dilations": [1, 3, 5],
        "cluster_hidden": 64,
        "cluster_blocks": 2,
        "seed": 0,
    },
    "augment": {
        "snr_range_db": [-5.0, 20.0],
        "mix_ratio_range_db": [-5.0, 5.0],
        "noise_prob": 0.25,
        "mix_prob": 0.25,
        "max_overlap": 0.5,
        "buffer_size": 64,
    },
    "mask": {
        "span_min": 10,
        "span_max": 25,
        "ratio_min": 0.40,
        "ratio_max": 0.65,
    },
    "train": {
        "lambda_start": 1.0,
        "lambda_end": 0.01,
        "t_max": 2000,
        "batch_size": 4,
        "lr_floor": 1e-5,
        "lr_peak": 1e-4,
        "warmup_frac": 0.10,
        "weight_decay": 1e-3,
        "clip_norm": 1.0,
        "ema_tau": 0.996,
        "baseline_mode": False,
        "pure_jepa": False,
        "seed": 0,
    },
    "analysis": {
        "k_probe": 16,
        "probe_l2": 1e-4,
        "probe_epochs": 300,
        "max_utterances": None,
        "seed": 0,
    },
}


def _merge(base, user, path=""):
    out = copy.deepcopy(base)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here!r} must be a section object")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path=None):
    """Defaults, optionally overlaid with a JSON file. Unknown keys at any
    level are rejected."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    with open(path) as f:
        try:
            user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return _merge(DEFAULTS, user)


def apply_overrides(cfg, overrides):
    """Dotted-path overrides like {'train.lambda_end': 0.0}; returns a new
    config. Unknown paths are rejected."""
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config path {dotted!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config path {dotted!r}")
        node[parts[-1]] = value
    return out


def write_snapshot(cfg, overrides, out_dir):
    """Resolved config plus the explicit overrides that produced it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    with open(path, "w") as f:
        json.dump({"config": cfg, "overrides": overrides}, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


# -- section constructors --------------------------------------------------

def corpus_spec(cfg):
    c = cfg["corpus"]
    return SynthCorpusSpec(
        n_utterances=c["n_utterances"], duration_s=tuple(c["duration_s"]),
        n_phone_classes=c["n_phone_classes"], sample_rate=c["sample_rate"],
        noise_floor=c["noise_floor"], pitch_hz=c["pitch_hz"],
        segment_ms=tuple(c["segment_ms"]), rng_seed=c["rng_seed"])


def encoder_config(cfg, cluster_k):
    e = cfg["encoder"]
    return EncoderConfig(
        frontend=e["frontend"], n_mels=cfg["features"]["n_mels"],
        channels=tuple(e["channels"]), strides=tuple(e["strides"]),
        n_conformer_layers=e["n_conformer_layers"], latent_dim=e["latent_dim"],
        n_heads=e["n_heads"], ffn_mult=e["ffn_mult"],
        conv_kernel=e["conv_kernel"], rel_pos_buckets=e["rel_pos_buckets"],
        rel_pos_max_dist=e["rel_pos_max_dist"],
        daam_gaussians=e["daam_gaussians"], dilations=tuple(e["dilations"]),
        cluster_k=cluster_k, cluster_hidden=e["cluster_hidden"],
        cluster_blocks=e["cluster_blocks"], seed=e["seed"])


def train_config(cfg):
    t = cfg["train"]
    f = cfg["features"]
    return TrainConfig(
        lambda_start=t["lambda_start"], lambda_end=t["lambda_end"],
        t_max=t["t_max"], batch_size=t["batch_size"], lr_floor=t["lr_floor"],
        lr_peak=t["lr_peak"], warmup_frac=t["warmup_frac"],
        weight_decay=t["weight_decay"], clip_norm=t["clip_norm"],
        ema_tau=t["ema_tau"], baseline_mode=t["baseline_mode"],
        pure_jepa=t["pure_jepa"], n_mels=f["n_mels"],
        frame_len=f["frame_len"], frame_hop=f["frame_hop"], seed=t["seed"])


def mask_spec(cfg):
    m = cfg["mask"]
    return MaskSpec(span_min=m["span_min"], span_max=m["span_max"],
                    ratio_min=m["ratio_min"], ratio_max=m["ratio_max"])


def augment_config(cfg):
    a = cfg["augment"]
    return AugmentConfig(
        snr_range_db=tuple(a["snr_range_db"]),
        mix_ratio_range_db=tuple(a["mix_ratio_range_db"]),
        noise_prob=a["noise_prob"], mix_prob=a["mix_prob"],
        max_overlap=a["max_overlap"], buffer_size=a["buffer_size"])
