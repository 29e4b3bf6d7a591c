"""Layered pipeline configuration: built-in defaults < JSON file < command-line overrides.

The configuration is a nested dict grouped by stage.  Every leaf is
validated with its dotted key path so errors point at the offending entry.
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .delineate import DelineationConfig, WAVE_TYPES
from .errors import ConfigError
from .ingest import RHYTHM_CLASSES

ALLOWED_LABEL_FRACTIONS = (0.01, 0.1, 1.0)

DEFAULTS: dict = {
    "seed": 0,
    "synth": {"n_per_class": 40, "classes": list(RHYTHM_CLASSES), "fs": 500, "duration": 10.0,
              "noise_std": 0.01},
    "split": {"fractions": [0.7, 0.1, 0.2], "stratify": False},
    "preprocess": {"highpass_cutoff": 0.5, "highpass_order": 2, "notch_freq": 50.0, "notch_q": 30.0},
    "delineate": {f.name: f.default for f in fields(DelineationConfig)},
    "wave_ae": {"latent_dim": {"P": 12, "QRS": 24, "T": 12}, "channels": [32, 64, 128, 256],
                "max_segment_ms": {"P": 200.0, "QRS": 200.0, "T": 400.0}, "huber_beta": 1.0,
                "max_epochs": 30, "batch_size": 64, "lr": 1e-4, "weight_decay": 1e-4, "patience": 10},
    "vocab": {"k": "auto", "k_max": 40, "restarts": 5},
    "sentence": {"max_len": 256, "mask_prob": 0.2, "mask_strategy": "mask"},
    "model": {"d_model": 192, "n_layers": 8, "n_heads": 12, "ffn_mult": 4, "dropout": 0.1,
              "morph_feature_dim": 512, "morph_channels": [16, 32, 64, 128], "use_morphology": True,
              "freeze_morphology": False},
    "pretrain": {"max_epochs": 100, "batch_size": 64, "lr": 1e-4, "weight_decay": 3e-4,
                 "warmup_fraction": 0.1, "patience": 10},
    "finetune": {"max_epochs": 100, "batch_size": 64, "lr": 1e-4, "weight_decay": 1e-4,
                 "warmup_fraction": 0.1, "patience": 10, "label_fraction": 1.0,
                 "restricted_label_fraction": True, "lora_rank": 8, "lora_alpha": 16.0,
                 "train_morph_proj": False},
}


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict) and key != "k" and not (path.endswith("latent_dim") or path.endswith("max_segment_ms")):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_value(text: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(".".join(parts[:i + 1]), "unknown key")
        node = node[p]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(dotted, "unknown key")
    node[parts[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``{dotted.key: value}`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a mapping")
        cfg = _merge(cfg, data)
    for key, value in (overrides or {}).items():
        set_path(cfg, key, value)
    validate(cfg)
    return cfg


def _num(cfg, path, lo=None, hi=None, integer=False, lo_open=False, hi_open=False):
    node = cfg
    for p in path.split("."):
        node = node[p]
    if isinstance(node, bool) or not isinstance(node, (int, float)) or (integer and not float(node).is_integer()):
        raise ConfigError(path, f"expected {'an integer' if integer else 'a number'}, got {node!r}")
    if lo is not None and (node <= lo if lo_open else node < lo):
        raise ConfigError(path, f"must be {'>' if lo_open else '>='} {lo}, got {node}")
    if hi is not None and (node >= hi if hi_open else node > hi):
        raise ConfigError(path, f"must be {'<' if hi_open else '<='} {hi}, got {node}")


def _bool(cfg, path):
    a, b = path.split(".")
    if not isinstance(cfg[a][b], bool):
        raise ConfigError(path, f"expected true/false, got {cfg[a][b]!r}")


def validate(cfg: dict) -> None:
    """Raise :class:`ConfigError` naming the first invalid key."""
    _num(cfg, "seed", 0, integer=True)
    _num(cfg, "synth.n_per_class", 1, integer=True)
    _num(cfg, "synth.fs", 1, integer=True)
    _num(cfg, "synth.duration", 1.5)
    _num(cfg, "synth.noise_std", 0)
    classes = cfg["synth"]["classes"]
    if not isinstance(classes, list) or not classes or any(c not in RHYTHM_CLASSES for c in classes):
        raise ConfigError("synth.classes", f"must be a non-empty subset of {list(RHYTHM_CLASSES)}")
    fr = cfg["split"]["fractions"]
    if (not isinstance(fr, list) or len(fr) != 3 or any(not isinstance(f, (int, float)) or not 0 < f < 1 for f in fr)
            or abs(sum(fr) - 1) > 1e-9):
        raise ConfigError("split.fractions", "need three fractions in (0, 1) summing to 1")
    _bool(cfg, "split.stratify")
    _num(cfg, "preprocess.highpass_cutoff", 0, lo_open=True)
    _num(cfg, "preprocess.highpass_order", 1, integer=True)
    _num(cfg, "preprocess.notch_freq", 0, lo_open=True)
    _num(cfg, "preprocess.notch_q", 0, lo_open=True)
    if cfg["preprocess"]["notch_freq"] >= cfg["synth"]["fs"] / 2:
        raise ConfigError("preprocess.notch_freq", "must lie below the Nyquist frequency")
    for key in cfg["delineate"]:
        _num(cfg, f"delineate.{key}", 0, lo_open=True)

    ae = cfg["wave_ae"]
    for sub in ("latent_dim", "max_segment_ms"):
        if not isinstance(ae[sub], dict) or set(ae[sub]) != set(WAVE_TYPES):
            raise ConfigError(f"wave_ae.{sub}", f"need one entry for each of {list(WAVE_TYPES)}")
        for w in WAVE_TYPES:
            _num(cfg, f"wave_ae.{sub}.{w}", 1, integer=sub == "latent_dim")
    ch = ae["channels"]
    if not isinstance(ch, list) or len(ch) != 4 or any(not isinstance(c, int) or c < 1 for c in ch):
        raise ConfigError("wave_ae.channels", "need four positive integers")
    _num(cfg, "wave_ae.huber_beta", 0, lo_open=True)
    for stage in ("wave_ae", "pretrain", "finetune"):
        _num(cfg, f"{stage}.max_epochs", 1, integer=True)
        _num(cfg, f"{stage}.batch_size", 1, integer=True)
        _num(cfg, f"{stage}.lr", 0)
        _num(cfg, f"{stage}.weight_decay", 0)
        _num(cfg, f"{stage}.patience", 1, integer=True)
    for stage in ("pretrain", "finetune"):
        _num(cfg, f"{stage}.warmup_fraction", 0, 1, hi_open=True)

    k = cfg["vocab"]["k"]
    if k != "auto":
        if not isinstance(k, dict) or set(k) != set(WAVE_TYPES):
            raise ConfigError("vocab.k", "must be \"auto\" or a mapping with P, QRS and T")
        for w in WAVE_TYPES:
            _num(cfg, f"vocab.k.{w}", 1, integer=True)
    _num(cfg, "vocab.k_max", 4, integer=True)
    _num(cfg, "vocab.restarts", 1, integer=True)

    _num(cfg, "sentence.max_len", 4, integer=True)
    _num(cfg, "sentence.mask_prob", 0, 1, lo_open=True)
    if cfg["sentence"]["mask_strategy"] not in ("mask", "bert"):
        raise ConfigError("sentence.mask_strategy", "must be \"mask\" or \"bert\"")

    for key in ("d_model", "n_layers", "n_heads", "ffn_mult", "morph_feature_dim"):
        _num(cfg, f"model.{key}", 1, integer=True)
    if cfg["model"]["d_model"] % cfg["model"]["n_heads"]:
        raise ConfigError("model.d_model", f"{cfg['model']['d_model']} is not divisible by "
                                           f"model.n_heads={cfg['model']['n_heads']}")
    _num(cfg, "model.dropout", 0, 1, hi_open=True)
    mc = cfg["model"]["morph_channels"]
    if not isinstance(mc, list) or not mc or any(not isinstance(c, int) or c < 1 for c in mc):
        raise ConfigError("model.morph_channels", "need a non-empty list of positive integers")
    _bool(cfg, "model.use_morphology")
    _bool(cfg, "model.freeze_morphology")

    ft = cfg["finetune"]
    _bool(cfg, "finetune.restricted_label_fraction")
    _bool(cfg, "finetune.train_morph_proj")
    _num(cfg, "finetune.label_fraction", 0, 1, lo_open=True)
    if ft["restricted_label_fraction"] and not any(abs(ft["label_fraction"] - a) < 1e-12
                                                   for a in ALLOWED_LABEL_FRACTIONS):
        raise ConfigError("finetune.label_fraction",
                          f"{ft['label_fraction']} not in {list(ALLOWED_LABEL_FRACTIONS)} "
                          "(set finetune.restricted_label_fraction=false to allow any value)")
    _num(cfg, "finetune.lora_rank", 1, integer=True)
    _num(cfg, "finetune.lora_alpha", 0, lo_open=True)
