"""Masked-token pretraining and LoRA fine-tuning loops, plus model checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import file_sha256, load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .encoder import ModelConfig, RhythmModel, batch_tensors
from .errors import DataError, DivergenceError
from .evaluation import macro_auroc
from .ingest import label_fraction_size
from .optim import AdamW, EarlyStopping, TrainHyper, check_finite, clip_grad_norm, lr_at
from .sentence import IGNORE, TokenSequence, apply_mlm_mask, pad_and_batch

_VAL_STREAM = 0x5EED


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class TrainResult:
    model: RhythmModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")


def write_history(path, history: Sequence[dict]) -> None:
    """CSV with columns epoch, train_loss, val_metric, lr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_metric", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(float(h["val_metric"])), repr(float(h["lr"]))])


def _nonempty(seqs: Sequence[TokenSequence]) -> list[TokenSequence]:
    return [s for s in seqs if len(s) > 0]


def _trainable(model) -> list:
    return [p for p in model.parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def mlm_loss_sum(model: RhythmModel, batch) -> tuple[torch.Tensor, int]:
    """Summed masked cross-entropy and the number of labelled positions."""
    ids, att = batch_tensors(batch)
    hidden = model(ids, att, batch.segments)
    logits = model.mlm_logits(hidden)
    labels = torch.as_tensor(batch.mlm_labels)
    n = int((labels != IGNORE).sum())
    if n == 0:
        return logits.sum() * 0.0, 0
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1),
                           ignore_index=IGNORE, reduction="sum"), n


def validation_batches(seqs, batch_size: int, max_len: int, seed: int, mask_prob: float = 0.2):
    """Fixed masked batches so validation loss is comparable across epochs."""
    out = []
    for b, i in enumerate(range(0, len(seqs), batch_size)):
        batch = pad_and_batch(seqs[i:i + batch_size], max_len)
        out.append(apply_mlm_mask(batch, mask_prob, _seed(seed, _VAL_STREAM, b)))
    return out


def mlm_eval(model: RhythmModel, batches) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches:
            loss, n = mlm_loss_sum(model, batch)
            total += loss.item()
            count += n
    return total / count if count else float("nan")


def pretrain_mlm(model: RhythmModel, train_seqs: Sequence[TokenSequence], val_seqs: Sequence[TokenSequence],
                 hyper: TrainHyper | None = None, mask_prob: float = 0.2, strategy: str = "mask",
                 target_loss: float | None = None, log=None) -> TrainResult:
    """Train with the masked-token objective and keep the best-validation weights.

    Each epoch reshuffles the training records and draws a fresh mask per
    batch from ``(seed, epoch, batch)``; validation masks are drawn once.
    Training ends early after ``hyper.patience`` epochs without improvement,
    or as soon as the validation loss reaches ``target_loss`` if given.
    """
    hyper = hyper or TrainHyper.for_mlm()
    train_seqs, val_seqs = _nonempty(train_seqs), _nonempty(val_seqs)
    if not train_seqs:
        raise DataError("empty pretraining corpus")
    if not val_seqs:
        val_seqs = train_seqs
    max_len = model.config.max_len
    val_batches = validation_batches(val_seqs, hyper.batch_size, max_len, hyper.seed, mask_prob)
    torch.manual_seed(hyper.seed)
    opt = AdamW(model.named_parameters(), hyper.weight_decay, hyper.betas, hyper.eps)
    steps_per_epoch = math.ceil(len(train_seqs) / hyper.batch_size)
    total_steps = steps_per_epoch * hyper.max_epochs
    stopper = EarlyStopping(hyper.patience, "min")
    best_state, history, step = module_arrays(model), [], 0
    for epoch in range(1, hyper.max_epochs + 1):
        model.train()
        order = np.random.default_rng(_seed(hyper.seed, epoch)).permutation(len(train_seqs))
        run, count, lr = 0.0, 0, 0.0
        for b, i in enumerate(range(0, len(order), hyper.batch_size)):
            batch = pad_and_batch([train_seqs[j] for j in order[i:i + hyper.batch_size]], max_len)
            batch = apply_mlm_mask(batch, mask_prob, _seed(hyper.seed, epoch, b), strategy, model.config.vocab_size)
            loss_sum, n = mlm_loss_sum(model, batch)
            if n == 0:
                continue
            loss = loss_sum / n
            check_finite(loss, f"pretraining epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if hyper.clip_norm is not None:
                clip_grad_norm(_trainable(model), hyper.clip_norm)
            lr = lr_at(hyper, step, total_steps)
            opt.step(lr)
            step += 1
            run += loss_sum.item()
            count += n
        val = mlm_eval(model, val_batches)
        if not math.isfinite(val):
            raise DivergenceError(f"validation loss non-finite at epoch {epoch}")
        train_loss = run / count if count else float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_metric": val, "lr": lr})
        if log:
            log(f"[mlm] epoch {epoch} train {train_loss:.4f} val {val:.4f} lr {lr:.2e}")
        if stopper.update(val, epoch):
            best_state = module_arrays(model)
        if stopper.stop or (target_loss is not None and val <= target_loss):
            break
    load_module_arrays(model, best_state)
    model.eval()
    return TrainResult(model, history, stopper.best_epoch, stopper.best)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

def _label_matrix(labels) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float32)
    return y[:, None] if y.ndim == 1 else y


def predict_scores(model: RhythmModel, seqs: Sequence[TokenSequence], batch_size: int = 64) -> np.ndarray:
    """Sigmoid label probabilities ``(n, n_labels)`` in eval mode."""
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch_size):
            batch = pad_and_batch(seqs[i:i + batch_size], model.config.max_len)
            ids, att = batch_tensors(batch)
            out.append(torch.sigmoid(model.classify(model(ids, att, batch.segments), att)).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.n_labels), dtype=np.float32)


def subsample_fraction(n: int, label_fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a deterministic ``label_fraction`` subset (at least one item)."""
    k = label_fraction_size(n, label_fraction)
    return np.sort(np.random.default_rng(_seed(seed, 0xF4AC)).permutation(n)[:k])


def adapter_parameter_names(model: RhythmModel, train_morph_proj: bool = False) -> list[str]:
    names = [n for n, _ in model.named_parameters() if "lora_" in n or n.startswith("classifier.")]
    if train_morph_proj and model.config.use_morphology:
        names += [n for n, _ in model.named_parameters() if n.startswith("morph_proj.")]
    return names


def _set_finetune_mode(model: RhythmModel) -> None:
    # dropout stays active; batch-norm statistics of the frozen morphology branch must not move
    model.train()
    if model.config.use_morphology:
        model.morph.eval()


def finetune_lora(model: RhythmModel, train_seqs: Sequence[TokenSequence], train_labels,
                  val_seqs: Sequence[TokenSequence], val_labels, hyper: TrainHyper | None = None,
                  label_fraction: float = 1.0, rank: int = 8, alpha: float = 16.0,
                  train_morph_proj: bool = False, log=None) -> TrainResult:
    """Attach LoRA adapters and a classifier, train only those, and keep the best validation epoch.

    The metric is validation macro AUROC; if no label has both classes in
    the validation set the negative validation loss is used instead.
    """
    hyper = hyper or TrainHyper.for_finetune()
    y_train, y_val = _label_matrix(train_labels), _label_matrix(val_labels)
    if len(train_seqs) != len(y_train) or len(val_seqs) != len(y_val):
        raise DataError("sequence and label counts differ")
    if len(train_seqs) == 0:
        raise DataError("no labelled training records")
    keep = subsample_fraction(len(train_seqs), label_fraction, hyper.seed)
    train_seqs = [train_seqs[i] for i in keep]
    y_train = y_train[keep]
    if any(len(s) == 0 for s in list(train_seqs) + list(val_seqs)):
        raise DataError("labelled record without any beats")

    n_labels = y_train.shape[1]
    torch.manual_seed(hyper.seed)
    for p in model.parameters():
        p.requires_grad_(False)
    model.add_classifier(n_labels)
    model.add_lora(rank, alpha)
    trainable = set(adapter_parameter_names(model, train_morph_proj))
    for n, p in model.named_parameters():
        p.requires_grad_(n in trainable)
    opt = AdamW(model.named_parameters(), hyper.weight_decay, hyper.betas, hyper.eps)
    steps_per_epoch = math.ceil(len(train_seqs) / hyper.batch_size)
    total_steps = steps_per_epoch * hyper.max_epochs
    stopper = EarlyStopping(hyper.patience, "max")
    history, step, best_state = [], 0, None
    yv = torch.as_tensor(y_val)
    for epoch in range(1, hyper.max_epochs + 1):
        _set_finetune_mode(model)
        order = np.random.default_rng(_seed(hyper.seed, epoch)).permutation(len(train_seqs))
        run, seen, lr = 0.0, 0, 0.0
        for i in range(0, len(order), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            batch = pad_and_batch([train_seqs[j] for j in idx], model.config.max_len)
            ids, att = batch_tensors(batch)
            logits = model.classify(model(ids, att, batch.segments), att)
            loss = F.binary_cross_entropy_with_logits(logits, torch.as_tensor(y_train[idx]))
            check_finite(loss, f"fine-tuning epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if hyper.clip_norm is not None:
                clip_grad_norm(_trainable(model), hyper.clip_norm)
            lr = lr_at(hyper, step, total_steps)
            opt.step(lr)
            step += 1
            run += loss.item() * len(idx)
            seen += len(idx)
        scores = predict_scores(model, val_seqs, hyper.batch_size)
        try:
            metric, _ = macro_auroc(scores, y_val)
        except ValueError:
            probs = torch.as_tensor(scores).clamp(1e-7, 1 - 1e-7)
            metric = -float(F.binary_cross_entropy(probs, yv))
        history.append({"epoch": epoch, "train_loss": run / seen, "val_metric": metric, "lr": lr})
        if log:
            log(f"[finetune] epoch {epoch} train {run / seen:.4f} val {metric:.4f}")
        if stopper.update(metric, epoch):
            best_state = {n: p.detach().clone() for n, p in model.named_parameters() if n in trainable}
        if stopper.stop:
            break
    with torch.no_grad():
        for n, p in model.named_parameters():
            if n in best_state:
                p.copy_(best_state[n])
    model.eval()
    return TrainResult(model, history, stopper.best_epoch, stopper.best)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_model(model: RhythmModel, path, extra: dict | None = None) -> str:
    """Base model checkpoint (adapter and classifier tensors excluded)."""
    arrays = {k: v for k, v in module_arrays(model).items() if "lora_" not in k and not k.startswith("classifier.")}
    # adapted projections are stored under their plain names
    arrays = {k.replace(".base.", "."): v for k, v in arrays.items()}
    meta = {"kind": "rhythm_model", "config": model.config.to_dict(), **(extra or {})}
    return save_checkpoint(path, arrays, meta)


def load_model(path) -> RhythmModel:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "rhythm_model":
        raise DataError(f"{path}: not a model checkpoint")
    model = RhythmModel(ModelConfig.from_dict(meta["config"]))
    load_module_arrays(model, tensors)
    model.eval()
    return model


def save_adapter(model: RhythmModel, path, base_sha256: str, extra: dict | None = None,
                 train_morph_proj: bool = False) -> str:
    names = set(adapter_parameter_names(model, train_morph_proj))
    arrays = {k: v for k, v in module_arrays(model).items() if k in names}
    lora = next(m for m in model.modules() if hasattr(m, "lora_A"))
    meta = {"kind": "lora_adapter", "base_sha256": base_sha256, "rank": lora.rank, "alpha": lora.alpha,
            "n_labels": model.n_labels, **(extra or {})}
    return save_checkpoint(path, arrays, meta)


def load_finetuned(base_path, adapter_path) -> tuple[RhythmModel, dict]:
    """Rebuild a fine-tuned model; refuses adapters trained against another base."""
    tensors, meta = load_checkpoint(adapter_path)
    if meta.get("kind") != "lora_adapter":
        raise DataError(f"{adapter_path}: not an adapter checkpoint")
    digest = file_sha256(base_path)
    if digest != meta["base_sha256"]:
        raise DataError(f"{adapter_path}: adapter expects base {meta['base_sha256'][:12]}, got {digest[:12]}")
    model = load_model(base_path)
    model.add_classifier(meta["n_labels"])
    model.add_lora(meta["rank"], meta["alpha"])
    load_module_arrays(model, {**module_arrays(model), **tensors})
    model.eval()
    return model, meta


def write_scores(path, record_ids, scores, label_names) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id"] + list(label_names))
        for rid, row in zip(record_ids, scores):
            w.writerow([rid] + [repr(float(v)) for v in row])
