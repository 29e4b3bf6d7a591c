"""Per-wave convolutional autoencoders.

Each wave type (P, QRS, T) gets its own model that maps a variable-length,
z-scored segment to a fixed-size latent vector.  Batches are right-padded;
padded samples never influence batch-norm statistics, pooling, or the loss.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_module_arrays, module_arrays, save_checkpoint
from .delineate import WAVE_TYPES
from .errors import ConfigError, DataError, DivergenceError
from .layers import MaskedBatchNorm1d, length_mask, masked_max, masked_mean, pad_batch, strided_lengths
from .optim import AdamW, EarlyStopping, TrainHyper, check_finite, clip_grad_norm, epoch_seed, lr_at

DEFAULT_LATENT = {"P": 12, "QRS": 24, "T": 12}
DEFAULT_MAX_MS = {"P": 200.0, "QRS": 200.0, "T": 400.0}


@dataclass(frozen=True)
class AeConfig:
    wave_type: str
    latent_dim: int
    max_segment_len: int
    channels: tuple[int, ...] = (32, 64, 128, 256)
    stride: int = 2
    kernel_size: int = 7
    huber_beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.wave_type not in WAVE_TYPES:
            raise ConfigError("wave_type", f"unknown wave type {self.wave_type!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim", "must be >= 1")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError("channels", "need exactly 4 positive block widths")
        if self.stride != 2:
            raise ConfigError("stride", "blocks downsample by exactly 2")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size", "must be odd")
        if self.max_segment_len < 1:
            raise ConfigError("max_segment_len", "must be >= 1")
        if not self.huber_beta > 0:
            raise ConfigError("huber_beta", "must be > 0")

    @classmethod
    def for_wave(cls, wave_type: str, fs: int, **kw) -> "AeConfig":
        """Default config for ``wave_type`` with the length cap converted to samples at ``fs``."""
        kw.setdefault("latent_dim", DEFAULT_LATENT.get(wave_type, 12))
        kw.setdefault("max_segment_len", int(round(DEFAULT_MAX_MS.get(wave_type, 200.0) * fs / 1000)))
        return cls(wave_type=wave_type, **kw)

    @property
    def bottleneck_len(self) -> int:
        return math.ceil(self.max_segment_len / 16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AeConfig":
        return cls(**{**d, "channels": tuple(d["channels"])})


class _EncoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, k, stride=2, padding=k // 2, bias=False)
        self.bn = MaskedBatchNorm1d(c_out)

    def forward(self, x, lengths):
        x = self.conv(x)
        lengths = strided_lengths(lengths, 2)
        mask = length_mask(lengths, x.shape[-1])
        return F.gelu(self.bn(x, mask)) * mask[:, None, :], lengths


class _DecoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int):
        super().__init__()
        self.conv = nn.ConvTranspose1d(c_in, c_out, k, stride=2, padding=k // 2, output_padding=1, bias=False)
        self.bn = MaskedBatchNorm1d(c_out)

    def forward(self, x):
        x = self.conv(x)
        full = torch.ones(x.shape[0], x.shape[-1], dtype=torch.bool)
        return F.gelu(self.bn(x, full))


class WaveAutoencoder(nn.Module):
    """Encoder/decoder pair for one wave type."""

    def __init__(self, config: AeConfig):
        super().__init__()
        self.config = config
        ch, k = config.channels, config.kernel_size
        widths = (1,) + ch
        self.enc_blocks = nn.ModuleList(_EncoderBlock(widths[i], widths[i + 1], k) for i in range(4))
        self.enc_out = nn.Linear(2 * ch[-1], config.latent_dim)
        self.dec_in = nn.Linear(config.latent_dim, ch[-1] * config.bottleneck_len)
        rev = ch[::-1]
        self.dec_blocks = nn.ModuleList(_DecoderBlock(rev[i], rev[i + 1] if i < 3 else rev[3], k) for i in range(4))
        self.dec_out = nn.Conv1d(rev[3], 1, 1)

    def encode(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """``x`` is ``(B, L)`` right-padded; returns ``(B, latent_dim)``."""
        if int(lengths.max()) > self.config.max_segment_len:
            raise DataError(f"segment longer than max_segment_len={self.config.max_segment_len}")
        if int(lengths.min()) < 1:
            raise DataError("empty segment")
        mask = length_mask(lengths, x.shape[-1])
        h = (x * mask)[:, None, :]
        for block in self.enc_blocks:
            h, lengths = block(h, lengths)
        mask = length_mask(lengths, h.shape[-1])
        feats = torch.cat([masked_mean(h, mask), masked_max(h, mask)], dim=1)
        return self.enc_out(feats)

    def decode(self, z: torch.Tensor, target_len: int) -> torch.Tensor:
        """Returns ``(B, target_len)`` reconstructions."""
        if target_len > self.config.max_segment_len:
            raise DataError(f"target_len {target_len} exceeds max_segment_len={self.config.max_segment_len}")
        if z.shape[-1] != self.config.latent_dim:
            raise DataError(f"latent has {z.shape[-1]} dims, expected {self.config.latent_dim}")
        h = self.dec_in(z).view(z.shape[0], self.config.channels[-1], self.config.bottleneck_len)
        for block in self.dec_blocks:
            h = block(h)
        return self.dec_out(h)[:, 0, :target_len]

    def forward(self, x, lengths):
        return self.decode(self.encode(x, lengths), x.shape[-1])


def huber_loss(x, x_hat, beta: float = 1.0, lengths=None):
    """Mean Huber loss, ``r**2/2`` inside ``|r| <= beta`` and ``beta*(|r| - beta/2)`` outside.

    With 2-D inputs and ``lengths``, each row is averaged over its valid
    samples and the rows are then averaged.  NumPy inputs return a float.
    """
    as_float = not isinstance(x, torch.Tensor)
    x, x_hat = torch.as_tensor(x), torch.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    r = (x - x_hat).abs()
    ell = torch.where(r <= beta, 0.5 * r * r, beta * (r - 0.5 * beta))
    if lengths is None:
        out = ell.mean()
    else:
        mask = length_mask(torch.as_tensor(lengths), ell.shape[-1]).to(ell.dtype)
        out = ((ell * mask).sum(-1) / mask.sum(-1)).mean()
    return float(out) if as_float else out


def truncate_segment(samples: np.ndarray, peak_offset: int, max_len: int) -> np.ndarray:
    """Keep ``max_len`` samples centred on the peak, shifted inward at the edges."""
    n = len(samples)
    if n <= max_len:
        return samples
    start = min(max(peak_offset - max_len // 2, 0), n - max_len)
    return samples[start:start + max_len]


def prepare_segments(segments, config: AeConfig, counter: dict | None = None) -> list[np.ndarray]:
    """Check wave types and truncate oversized segments, counting truncations."""
    out = []
    for s in segments:
        if s.wave_type != config.wave_type:
            raise DataError(f"{s.record_id}: {s.wave_type} segment given to {config.wave_type} autoencoder")
        arr = np.asarray(s.samples, dtype=np.float32)
        if len(arr) > config.max_segment_len:
            arr = truncate_segment(arr, s.peak_offset, config.max_segment_len)
            if counter is not None:
                counter["truncated"] = counter.get("truncated", 0) + 1
        out.append(arr)
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _eval_loss(model: WaveAutoencoder, arrays, batch_size: int, dtype=torch.float32) -> float:
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for idx in _batches(len(arrays), batch_size, None):
            x, lengths = pad_batch([arrays[i] for i in idx], dtype=dtype)
            loss = huber_loss(x, model(x, lengths), model.config.huber_beta, lengths)
            total += loss.item() * len(idx)
            count += len(idx)
    return total / count


@dataclass
class AeTrainResult:
    model: WaveAutoencoder
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    truncated: int = 0


def split_train_val(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffle split; at least one validation item when ``n >= 2``.

    A single item serves as both training and validation data.
    """
    if n == 1:
        return np.array([0]), np.array([0])
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_ae(config: AeConfig, segments, hyper: TrainHyper | None = None, log=None) -> AeTrainResult:
    """Fit an autoencoder with AdamW on a 90/10 split, keeping the best validation epoch.

    The history's first row (epoch 0) is the validation loss before training.
    """
    hyper = hyper or TrainHyper.for_ae()
    if len(segments) == 0:
        raise DataError("no segments to train on")
    counter: dict = {}
    arrays = prepare_segments(segments, config, counter)
    tr_idx, va_idx = split_train_val(len(arrays), hyper.seed)
    train_set = [arrays[i] for i in tr_idx]
    val_set = [arrays[i] for i in va_idx]

    torch.manual_seed(hyper.seed)
    model = WaveAutoencoder(config)
    opt = AdamW(model.named_parameters(), hyper.weight_decay, hyper.betas, hyper.eps)
    steps_per_epoch = math.ceil(len(train_set) / hyper.batch_size)
    total_steps = steps_per_epoch * hyper.max_epochs

    val0 = _eval_loss(model, val_set, hyper.batch_size)
    history = [{"epoch": 0, "train_loss": float("nan"), "val_loss": val0, "lr": 0.0}]
    stopper = EarlyStopping(hyper.patience, "min")
    stopper.update(val0, 0)
    best_state = module_arrays(model)
    step = 0
    for epoch in range(1, hyper.max_epochs + 1):
        model.train()
        rng = np.random.default_rng(epoch_seed(hyper.seed, epoch))
        run, seen, lr = 0.0, 0, 0.0
        for idx in _batches(len(train_set), hyper.batch_size, rng):
            x, lengths = pad_batch([train_set[i] for i in idx])
            loss = huber_loss(x, model(x, lengths), config.huber_beta, lengths)
            check_finite(loss, f"{config.wave_type} autoencoder epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if hyper.clip_norm is not None:
                clip_grad_norm(model.parameters(), hyper.clip_norm)
            lr = lr_at(hyper, step, total_steps)
            opt.step(lr)
            step += 1
            run += loss.item() * len(idx)
            seen += len(idx)
        val = _eval_loss(model, val_set, hyper.batch_size)
        if not math.isfinite(val):
            raise DivergenceError(f"validation loss non-finite at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": run / seen, "val_loss": val, "lr": lr})
        if log:
            log(f"[{config.wave_type}] epoch {epoch} train {run / seen:.5f} val {val:.5f}")
        if stopper.update(val, epoch):
            best_state = module_arrays(model)
        if stopper.stop:
            break
    load_module_arrays(model, best_state)
    model.eval()
    return AeTrainResult(model, history, stopper.best_epoch, counter.get("truncated", 0))


def encode_segments(model: WaveAutoencoder, segments, batch_size: int = 256) -> np.ndarray:
    """Latents ``(n, latent_dim)`` in eval mode, in input order."""
    arrays = prepare_segments(segments, model.config)
    model.eval()
    out = np.zeros((len(arrays), model.config.latent_dim), dtype=np.float32)
    with torch.no_grad():
        for idx in _batches(len(arrays), batch_size, None):
            x, lengths = pad_batch([arrays[i] for i in idx])
            out[idx] = model.encode(x, lengths).numpy()
    return out


def export_latents(model: WaveAutoencoder, segments, path) -> int:
    """Write one CSV row per segment: record_id, beat_idx, wave_type, z0..z{d-1}."""
    z = encode_segments(model, segments)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "beat_idx", "wave_type"] + [f"z{i}" for i in range(z.shape[1])])
        for s, row in zip(segments, z):
            w.writerow([s.record_id, s.beat_idx, s.wave_type] + [repr(float(v)) for v in row])
    return len(segments)


def save_ae(model: WaveAutoencoder, path, extra: dict | None = None) -> str:
    meta = {"kind": "wave_ae", "config": model.config.to_dict(), **(extra or {})}
    return save_checkpoint(path, module_arrays(model), meta)


def load_ae(path) -> WaveAutoencoder:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "wave_ae":
        raise DataError(f"{path}: not an autoencoder checkpoint")
    model = WaveAutoencoder(AeConfig.from_dict(meta["config"]))
    load_module_arrays(model, tensors)
    model.eval()
    return model
