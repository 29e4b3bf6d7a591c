"""Command-line entry point: one subcommand per pipeline stage plus ``pipeline``.

Every subcommand works inside ``--workdir`` using fixed artifact names
(overridable per flag), never modifies its inputs, and writes a manifest to
``manifests/<subcommand>.json`` with the config snapshot, seed, package
versions and SHA-256 hashes of inputs and outputs.  Paths in manifests are
relative to the workdir and no timestamps are recorded, so reruns produce
byte-identical files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import load_config, parse_value
from .delineate import WAVE_TYPES, DelineationConfig, delineate_record, extract_segments, read_fiducials, write_fiducials
from .encoder import ModelConfig, RhythmModel
from .errors import ConfigError, DataError, DivergenceError
from .evaluation import EvalReport
from .ingest import EcgRecord, LabelSet, SplitSpec, generate_synthetic, make_splits, read_label_set, read_records, write_records
from .optim import TrainHyper
from .preprocess import FilterSpec, preprocess_record
from .sentence import read_segments, read_token_stream, segment_index, sequences_from_segments, write_segments, write_token_stream
from .train import (finetune_lora, load_finetuned, load_model, predict_scores, pretrain_mlm, save_adapter,
                    save_model, write_history, write_scores)
from .vocab import WaveVocabulary, build_vocabulary
from .wave_ae import AeConfig, export_latents, encode_segments, load_ae, save_ae, train_ae

ARTIFACTS = {
    "raw": "data/raw",
    "splits": "splits.json",
    "clean": "data/clean",
    "fiducials": "fiducials.jsonl",
    "segments": "segments.bin",
    "ae": "ae_{wave}.ckpt",
    "ae_history": "ae_{wave}_history.csv",
    "latents": "latents.bin",
    "latents_csv": "latents_{wave}.csv",
    "vocab": "vocab.json",
    "tokens": "tokens.jsonl",
    "model": "model.ckpt",
    "pretrain_history": "pretrain_history.csv",
    "adapter": "adapter.ckpt",
    "finetune_history": "finetune_history.csv",
    "report": "report.json",
    "scores": "scores.csv",
}

PIPELINE = ("synth", "split", "preprocess", "delineate", "train-ae", "encode-waves", "build-vocab",
            "tokenize", "pretrain", "finetune", "evaluate", "export-latents")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

class Context:
    def __init__(self, args, cfg):
        self.args = args
        self.cfg = cfg
        self.workdir = Path(args.workdir)
        self.inputs: dict[str, Path] = {}
        self.outputs: dict[str, Path] = {}

    def path(self, key: str, override=None, **fmt) -> Path:
        if override:
            return Path(override)
        return self.workdir / ARTIFACTS[key].format(**fmt)

    def read(self, name: str, path: Path) -> Path:
        if not path.exists():
            raise DataError(f"missing input {name}: {path}")
        self.inputs[name] = path
        return path

    def write(self, name: str, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs[name] = path
        return path

    def log(self, msg: str) -> None:
        if not self.args.quiet:
            print(msg, file=sys.stderr)

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])


def content_hash(path: Path) -> str:
    """SHA-256 of a file, or of a directory's sorted (relative name, file hash) listing."""
    if path.is_file():
        return file_sha256(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(p.relative_to(path).as_posix().encode() + b"\0" + file_sha256(p).encode() + b"\n")
    return h.hexdigest()


def _rel(ctx: Context, p: Path) -> str:
    try:
        return Path(os.path.relpath(p, ctx.workdir)).as_posix()
    except ValueError:
        return p.as_posix()


def write_manifest(ctx: Context, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "seed": ctx.seed,
        "config": ctx.cfg,
        "inputs": {k: {"path": _rel(ctx, p), "sha256": content_hash(p)} for k, p in sorted(ctx.inputs.items())},
        "outputs": {k: {"path": _rel(ctx, p), "sha256": content_hash(p)} for k, p in sorted(ctx.outputs.items())},
        "versions": {"ecglang": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "torch": torch.__version__},
        "threads": torch.get_num_threads(),
        **(extra or {}),
    }
    path = ctx.workdir / "manifests" / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _hyper(section: dict, seed: int, kind: str) -> TrainHyper:
    kw = {"max_epochs": section["max_epochs"], "batch_size": section["batch_size"], "peak_lr": section["lr"],
          "weight_decay": section["weight_decay"], "patience": section["patience"], "seed": seed}
    if kind != "ae":
        kw["warmup_fraction"] = section["warmup_fraction"]
    return TrainHyper(**kw)


def _ae_config(cfg: dict, wave: str, fs: int) -> AeConfig:
    ae = cfg["wave_ae"]
    return AeConfig(wave_type=wave, latent_dim=int(ae["latent_dim"][wave]),
                    max_segment_len=int(round(ae["max_segment_ms"][wave] * fs / 1000)),
                    channels=tuple(ae["channels"]), huber_beta=float(ae["huber_beta"]))


def _splits(ctx: Context) -> dict:
    return json.loads(ctx.read("splits", ctx.path("splits", ctx.args.splits)).read_text())


def _sequences(ctx: Context) -> dict:
    segs = read_segments(ctx.read("segments", ctx.path("segments", ctx.args.segments)))
    seqs = read_token_stream(ctx.read("tokens", ctx.path("tokens", ctx.args.tokens)), segment_index(segs))
    return {s.record_id: s for s in seqs}


def _labelled(ctx: Context, ids, seqs: dict):
    records = {r.record_id: r for r in read_records(ctx.read("data", ctx.path("raw", ctx.args.data)))}
    label_set = read_label_set(ctx.path("raw", ctx.args.data))
    if label_set is None:
        raise DataError("dataset has no labels")
    keep = [i for i in ids if i in seqs and len(seqs[i]) > 0]
    missing = [i for i in keep if records[i].labels is None]
    if missing:
        raise DataError(f"record {missing[0]} has no labels")
    return [seqs[i] for i in keep], np.array([records[i].labels for i in keep], dtype=np.float32), label_set, keep


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(ctx: Context) -> dict:
    s = ctx.cfg["synth"]
    records = []
    classes = s["classes"]
    label_names = [c for c in classes if c != "regular"] or ["regular"]
    for ci, cls in enumerate(classes):
        recs, _ = generate_synthetic(s["n_per_class"], fs=s["fs"], duration=s["duration"], rhythm_class=cls,
                                     seed=int(np.random.SeedSequence([ctx.seed, ci]).generate_state(1)[0]),
                                     noise_std=s["noise_std"], id_prefix=f"{cls}_")
        lab = np.array([1 if n == cls else 0 for n in label_names], dtype=np.uint8)
        records += [EcgRecord(r.record_id, r.samples, r.fs, lab) for r in recs]
    write_records(records, ctx.write("data", ctx.path("raw", ctx.args.out)), LabelSet(label_names))
    return {"n_records": len(records)}


def cmd_split(ctx: Context) -> dict:
    records = read_records(ctx.read("data", ctx.path("raw", ctx.args.data)))
    sp = ctx.cfg["split"]
    train, val, test = make_splits(records, SplitSpec(tuple(sp["fractions"]), 1.0, ctx.seed, sp["stratify"]))
    out = ctx.write("splits", ctx.path("splits", ctx.args.out))
    out.write_text(json.dumps({"train": train, "val": val, "test": test}, indent=1) + "\n")
    return {"sizes": [len(train), len(val), len(test)]}


def cmd_preprocess(ctx: Context) -> dict:
    src = ctx.read("data", ctx.path("raw", ctx.args.data))
    records = read_records(src)
    spec = FilterSpec(**ctx.cfg["preprocess"])
    try:
        for fs in {r.fs for r in records}:
            spec.validate(fs)
    except ValueError as exc:
        raise ConfigError("preprocess", str(exc)) from exc
    write_records([preprocess_record(r, spec) for r in records], ctx.write("data", ctx.path("clean", ctx.args.out)),
                  read_label_set(src))
    return {"n_records": len(records)}


def cmd_delineate(ctx: Context) -> dict:
    records = read_records(ctx.read("data", ctx.path("clean", ctx.args.data)))
    dcfg = DelineationConfig(**ctx.cfg["delineate"])
    counter, fiducials, segments = Counter(), {}, []
    for r in records:
        try:
            beats = delineate_record(r.samples, r.fs, dcfg)
        except ValueError:
            beats = []
            counter["too_short"] += 1
        fiducials[r.record_id] = beats
        segments += extract_segments(r.samples, beats, r.record_id, counter)
    write_fiducials(ctx.write("fiducials", ctx.path("fiducials", ctx.args.out)), fiducials)
    write_segments(ctx.write("segments", ctx.path("segments", ctx.args.segments)), segments)
    counts = Counter(s.wave_type for s in segments)
    return {"n_beats": sum(len(b) for b in fiducials.values()), "segments": dict(sorted(counts.items())),
            "counters": dict(sorted(counter.items()))}


def _fs(ctx: Context) -> int:
    """Sampling rate of the cleaned dataset; segment length caps are converted with it."""
    manifest = ctx.path("clean", ctx.args.data) / "manifest.json"
    if not manifest.exists():
        return int(ctx.cfg["synth"]["fs"])
    fs = json.loads(manifest.read_text()).get("fs")
    if fs is None:
        raise DataError("records have mixed sampling rates; resample them to one rate first")
    return int(fs)


def _train_one_ae(ctx: Context, wave: str, segments, fs: int) -> dict:
    segs = [s for s in segments if s.wave_type == wave]
    if not segs:
        raise DataError(f"no {wave} segments to train on")
    result = train_ae(_ae_config(ctx.cfg, wave, fs), segs, _hyper(ctx.cfg["wave_ae"], ctx.seed, "ae"), ctx.log)
    save_ae(result.model, ctx.write(f"ae_{wave}", ctx.path("ae", None, wave=wave)),
            {"best_epoch": result.best_epoch, "truncated": result.truncated})
    hist = [{"epoch": h["epoch"], "train_loss": h["train_loss"], "val_metric": h["val_loss"], "lr": h["lr"]}
            for h in result.history]
    write_history(ctx.write(f"ae_{wave}_history", ctx.path("ae_history", None, wave=wave)), hist)
    return {"n_segments": len(segs), "best_epoch": result.best_epoch, "truncated": result.truncated,
            "best_val_loss": min(h["val_loss"] for h in result.history)}


def cmd_train_ae(ctx: Context) -> dict:
    segments = read_segments(ctx.read("segments", ctx.path("segments", ctx.args.segments)))
    waves = WAVE_TYPES if ctx.args.wave == "all" else (ctx.args.wave,)
    return {w: _train_one_ae(ctx, w, segments, _fs(ctx)) for w in waves}


def cmd_encode_waves(ctx: Context) -> dict:
    segments = read_segments(ctx.read("segments", ctx.path("segments", ctx.args.segments)))
    tensors, order = {}, {}
    for w in WAVE_TYPES:
        model = load_ae(ctx.read(f"ae_{w}", ctx.path("ae", None, wave=w)))
        segs = [s for s in segments if s.wave_type == w]
        tensors[w] = encode_segments(model, segs) if segs else np.zeros((0, model.config.latent_dim), np.float32)
        order[w] = [[s.record_id, s.beat_idx] for s in segs]
    save_checkpoint(ctx.write("latents", ctx.path("latents", ctx.args.out)), tensors, {"kind": "latents", "order": order})
    return {w: int(len(tensors[w])) for w in WAVE_TYPES}


def cmd_export_latents(ctx: Context) -> dict:
    segments = read_segments(ctx.read("segments", ctx.path("segments", ctx.args.segments)))
    waves = WAVE_TYPES if ctx.args.wave == "all" else (ctx.args.wave,)
    out = {}
    for w in waves:
        model = load_ae(ctx.read(f"ae_{w}", ctx.path("ae", None, wave=w)))
        segs = [s for s in segments if s.wave_type == w]
        out[w] = export_latents(model, segs, ctx.write(f"latents_{w}", ctx.path("latents_csv", None, wave=w)))
    return {"rows": out}


def cmd_build_vocab(ctx: Context) -> dict:
    tensors, _ = load_checkpoint(ctx.read("latents", ctx.path("latents", ctx.args.latents)))
    v = ctx.cfg["vocab"]
    vocab = build_vocabulary(tensors, v["k"], ctx.seed, v["restarts"])
    vocab.save(ctx.write("vocab", ctx.path("vocab", ctx.args.out)))
    return {"k": vocab.k, "size": vocab.size}


def cmd_tokenize(ctx: Context) -> dict:
    tensors, meta = load_checkpoint(ctx.read("latents", ctx.path("latents", ctx.args.latents)))
    vocab = WaveVocabulary.load(ctx.read("vocab", ctx.path("vocab", ctx.args.vocab)))
    fiducials = read_fiducials(ctx.read("fiducials", ctx.path("fiducials", ctx.args.fiducials)))
    segments = segment_index(read_segments(ctx.read("segments", ctx.path("segments", ctx.args.segments))))
    ordered, tokens = [], []
    for w in WAVE_TYPES:
        if len(tensors[w]):
            ids = vocab.assign(w, tensors[w])
            for (rid, beat), tok in zip(meta["order"][w], ids):
                ordered.append(segments[(rid, beat, w)])
                tokens.append(int(tok))
    counter = Counter()
    seqs = sequences_from_segments(ordered, tokens, {rid: len(b) for rid, b in fiducials.items()}, counter)
    write_token_stream(ctx.write("tokens", ctx.path("tokens", ctx.args.out)), seqs)
    return {"n_sequences": len(seqs), "n_tokens": int(sum(len(s) for s in seqs)),
            "counters": dict(sorted(counter.items()))}


def _model_config(ctx: Context, vocab_size: int) -> ModelConfig:
    m = ctx.cfg["model"]
    return ModelConfig(vocab_size=vocab_size, max_len=ctx.cfg["sentence"]["max_len"], d_model=m["d_model"],
                       n_layers=m["n_layers"], n_heads=m["n_heads"], ffn_mult=m["ffn_mult"], dropout=m["dropout"],
                       morph_feature_dim=m["morph_feature_dim"], morph_channels=tuple(m["morph_channels"]),
                       use_morphology=m["use_morphology"], freeze_morphology=m["freeze_morphology"])


def cmd_pretrain(ctx: Context) -> dict:
    vocab = WaveVocabulary.load(ctx.read("vocab", ctx.path("vocab", ctx.args.vocab)))
    seqs = _sequences(ctx)
    splits = _splits(ctx)
    train = [seqs[i] for i in splits["train"] if i in seqs]
    val = [seqs[i] for i in splits["val"] if i in seqs]
    torch.manual_seed(ctx.seed)
    model = RhythmModel(_model_config(ctx, vocab.size))
    s = ctx.cfg["sentence"]
    result = pretrain_mlm(model, train, val, _hyper(ctx.cfg["pretrain"], ctx.seed, "mlm"), s["mask_prob"],
                          s["mask_strategy"], log=ctx.log)
    save_model(result.model, ctx.write("model", ctx.path("model", ctx.args.out)), {"best_epoch": result.best_epoch})
    write_history(ctx.write("history", ctx.path("pretrain_history", None)), result.history)
    return {"best_epoch": result.best_epoch, "best_val_ce": result.best_metric, "epochs": len(result.history)}


def cmd_finetune(ctx: Context) -> dict:
    base_path = ctx.read("model", ctx.path("model", ctx.args.model))
    seqs = _sequences(ctx)
    splits = _splits(ctx)
    tr, ytr, label_set, _ = _labelled(ctx, splits["train"], seqs)
    va, yva, _, _ = _labelled(ctx, splits["val"], seqs)
    ft = ctx.cfg["finetune"]
    model = load_model(base_path)
    result = finetune_lora(model, tr, ytr, va, yva, _hyper(ft, ctx.seed, "ft"), ft["label_fraction"],
                           ft["lora_rank"], ft["lora_alpha"], ft["train_morph_proj"], ctx.log)
    save_adapter(result.model, ctx.write("adapter", ctx.path("adapter", ctx.args.out)), file_sha256(base_path),
                 {"label_names": label_set.names, "label_fraction": ft["label_fraction"]}, ft["train_morph_proj"])
    write_history(ctx.write("history", ctx.path("finetune_history", None)), result.history)
    return {"best_epoch": result.best_epoch, "best_val_auroc": result.best_metric, "n_train": len(tr)}


def cmd_evaluate(ctx: Context) -> dict:
    base = ctx.read("model", ctx.path("model", ctx.args.model))
    adapter = ctx.read("adapter", ctx.path("adapter", ctx.args.adapter))
    model, meta = load_finetuned(base, adapter)
    seqs = _sequences(ctx)
    splits = _splits(ctx)
    te, yte, label_set, ids = _labelled(ctx, splits[ctx.args.split], seqs)
    scores = predict_scores(model, te)
    report = EvalReport.from_scores(scores, yte, label_set.names,
                                    {"model": file_sha256(base), "adapter": file_sha256(adapter)})
    report.save(ctx.write("report", ctx.path("report", ctx.args.report)))
    write_scores(ctx.write("scores", ctx.path("scores", ctx.args.scores)), ids, scores, label_set.names)
    return {"macro_auroc": report.macro_auroc, "n_eval": report.n_eval}


COMMANDS = {
    "synth": cmd_synth, "split": cmd_split, "preprocess": cmd_preprocess, "delineate": cmd_delineate,
    "train-ae": cmd_train_ae, "encode-waves": cmd_encode_waves, "export-latents": cmd_export_latents,
    "build-vocab": cmd_build_vocab, "tokenize": cmd_tokenize, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "evaluate": cmd_evaluate,
}


def run_stage(name: str, args, cfg) -> dict:
    ctx = Context(args, cfg)
    ctx.log(f"== {name}")
    summary = COMMANDS[name](ctx)
    write_manifest(ctx, name, {"summary": summary})
    return summary


def cmd_pipeline(args, cfg) -> None:
    for name in PIPELINE:
        stage_args = argparse.Namespace(**vars(args))
        for key in ("out", "data", "segments", "tokens", "splits", "latents", "vocab", "fiducials", "model",
                    "adapter", "report", "scores"):
            setattr(stage_args, key, None)
        stage_args.wave = "all"
        stage_args.split = "test"
        run_stage(name, stage_args, cfg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_k(text: str) -> dict:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("vocab.k", f"expected three comma-separated counts for P,QRS,T, got {text!r}")
    try:
        return dict(zip(WAVE_TYPES, (int(p) for p in parts)))
    except ValueError as exc:
        raise ConfigError("vocab.k", f"not an integer list: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory holding all artifacts (default: .)")
    common.add_argument("--config", help="JSON config file layered over the defaults")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config entry by dotted key, e.g. pretrain.max_epochs=5")
    common.add_argument("--seed", type=int, help="global seed (config key: seed)")
    common.add_argument("--quiet", action="store_true", help="suppress progress logging")

    parser = argparse.ArgumentParser(prog="ecglang", description="Wave-token ECG language model pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, *flags):
        p = sub.add_parser(name, parents=[common], help=help_)
        for flag in flags:
            p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), help=f"override the default {flag} path")
        return p

    p = add("synth", "generate a labelled synthetic dataset", "out")
    p.add_argument("--n-per-class", type=int, help="records per rhythm class (config: synth.n_per_class)")
    add("split", "write train/val/test record lists", "data", "out")
    add("preprocess", "high-pass and notch filter every record", "data", "out")
    p = add("delineate", "detect beats, delineate waves and cut segments", "data", "out", "segments")
    p = add("train-ae", "train wave autoencoders", "segments", "data")
    p.add_argument("--wave", choices=list(WAVE_TYPES) + ["all"], default="all")
    add("encode-waves", "encode all segments into latents", "segments", "out")
    p = add("export-latents", "write per-segment latents as CSV", "segments")
    p.add_argument("--wave", choices=list(WAVE_TYPES) + ["all"], default="all")
    p = add("build-vocab", "cluster latents into the wave vocabulary", "latents", "out")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--auto-k", action="store_true", help="choose k per wave type by the knee of the wcss curve")
    g.add_argument("--k", help="fixed cluster counts P,QRS,T, e.g. 13,11,10")
    add("tokenize", "turn records into heartbeat-sentence token streams",
        "latents", "vocab", "fiducials", "segments", "out")
    add("pretrain", "masked-token pretraining", "vocab", "tokens", "segments", "splits", "out")
    p = add("finetune", "LoRA fine-tuning on labelled records", "model", "tokens", "segments", "splits", "data", "out")
    p.add_argument("--label-fraction", type=float, help="fraction of labelled training records (0.01, 0.1 or 1.0)")
    p.add_argument("--lora-rank", type=int, help="adapter rank (config: finetune.lora_rank)")
    p = add("evaluate", "macro AUROC report on a split", "model", "adapter", "tokens", "segments", "splits", "data",
            "report", "scores")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p = sub.add_parser("pipeline", parents=[common], help="run every stage in order on synthetic data")
    p.add_argument("--n-per-class", type=int, help="records per rhythm class (config: synth.n_per_class)")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE")
        key, value = item.split("=", 1)
        out[key.strip()] = parse_value(value)
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "n_per_class", None) is not None:
        out["synth.n_per_class"] = args.n_per_class
    if getattr(args, "label_fraction", None) is not None:
        out["finetune.label_fraction"] = args.label_fraction
    if getattr(args, "lora_rank", None) is not None:
        out["finetune.lora_rank"] = args.lora_rank
    if getattr(args, "auto_k", False):
        out["vocab.k"] = "auto"
    if getattr(args, "k", None):
        out["vocab.k"] = _parse_k(args.k)
    return out


def configure_threads() -> None:
    raw = os.environ.get("ECGLANG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("ECGLANG_THREADS", f"not an integer: {raw!r}") from None
    if n < 1:
        raise ConfigError("ECGLANG_THREADS", "must be >= 1")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_threads()
        cfg = load_config(args.config, _overrides(args))
        if args.command == "pipeline":
            cmd_pipeline(args, cfg)
        else:
            run_stage(args.command, args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 4
    except (DataError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
