"""Transformer backbone over wave tokens.

Input embedding per position is ``token + position (+ morphology)``, where
the morphology term is a small residual CNN over the raw segment behind a
waveform token, projected to ``d_model``.  The stack is post-norm
self-attention with a ReLU feed-forward block.  Heads: tied MLM projection
and a masked-mean-pool classifier.  LoRA adapters can be attached to the
query/value projections for fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError
from .layers import MaskedBatchNorm1d, length_mask, masked_mean, pad_batch, strided_lengths
from .sentence import IGNORE


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_len: int = 256
    d_model: int = 192
    n_layers: int = 8
    n_heads: int = 12
    ffn_mult: int = 4
    dropout: float = 0.1
    morph_feature_dim: int = 512
    morph_channels: tuple[int, ...] = (16, 32, 64, 128)
    use_morphology: bool = True
    freeze_morphology: bool = False

    def __post_init__(self):
        object.__setattr__(self, "morph_channels", tuple(int(c) for c in self.morph_channels))
        for name in ("vocab_size", "max_len", "d_model", "n_layers", "n_heads", "ffn_mult", "morph_feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model", f"{self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout", "must lie in [0, 1)")
        if not self.morph_channels or min(self.morph_channels) < 1:
            raise ConfigError("morph_channels", "need at least one positive width")

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["morph_channels"] = list(self.morph_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "morph_channels": tuple(d["morph_channels"])})


# ---------------------------------------------------------------------------
# morphology branch
# ---------------------------------------------------------------------------

class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.stride = stride
        self.conv1 = nn.Conv1d(c_in, c_out, 7, stride=stride, padding=3, bias=False)
        self.bn1 = MaskedBatchNorm1d(c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 7, padding=3, bias=False)
        self.bn2 = MaskedBatchNorm1d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Conv1d(c_in, c_out, 1, stride=stride, bias=False)
            self.skip_bn = MaskedBatchNorm1d(c_out)

    def forward(self, x, lengths):
        out_len = strided_lengths(lengths, self.stride)
        mask = length_mask(out_len, math.ceil(x.shape[-1] / self.stride))
        h = F.relu(self.bn1(self.conv1(x), mask))
        h = self.bn2(self.conv2(h), mask)
        s = x if self.skip is None else self.skip_bn(self.skip(x), mask)
        return F.relu(h + s) * mask[:, None, :], out_len


class MorphologyEncoder(nn.Module):
    """Residual 1-D CNN with masked global average pooling, then a linear map to ``feature_dim``."""

    def __init__(self, channels=(16, 32, 64, 128), feature_dim: int = 512):
        super().__init__()
        self.stem = nn.Conv1d(1, channels[0], 7, padding=3, bias=False)
        self.stem_bn = MaskedBatchNorm1d(channels[0])
        widths = (channels[0],) + tuple(channels)
        self.blocks = nn.ModuleList(
            _ResBlock(widths[i], widths[i + 1], 1 if i == 0 else 2) for i in range(len(channels)))
        self.out = nn.Linear(channels[-1], feature_dim)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        if int(lengths.min()) < 1:
            raise ValueError("empty segment")
        mask = length_mask(lengths, x.shape[-1])
        h = F.relu(self.stem_bn(self.stem((x * mask)[:, None, :]), mask)) * mask[:, None, :]
        for block in self.blocks:
            h, lengths = block(h, lengths)
        return self.out(masked_mean(h, length_mask(lengths, h.shape[-1])))


# ---------------------------------------------------------------------------
# attention stack
# ---------------------------------------------------------------------------

class LoraLinear(nn.Module):
    """``base(x) + (alpha / r) * B(A(x))`` with a frozen base and ``B`` initialised to zero."""

    def __init__(self, base: nn.Linear, rank: int = 8, alpha: float = 16.0):
        super().__init__()
        if rank < 1:
            raise ConfigError("lora_rank", "must be >= 1")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged_weight(self) -> torch.Tensor:
        return lora_merge(self.base.weight, self.lora_A, self.lora_B, self.alpha)


def lora_merge(W, A, B, alpha: float):
    """``W + (alpha / r) * B @ A`` for torch tensors or NumPy arrays."""
    r = A.shape[0]
    if B.shape[1] != r or B.shape[0] != W.shape[0] or A.shape[1] != W.shape[1]:
        raise ValueError(f"adapter shapes A{tuple(A.shape)} B{tuple(B.shape)} do not fit W{tuple(W.shape)}")
    return W + (alpha / r) * (B @ A)


def lora_apply(W, A, B, alpha: float, x, bias=None):
    """``x @ W.T + (alpha / r) * (x @ A.T) @ B.T`` without forming the merged weight."""
    lora_merge(W, A, B, alpha)  # shape check only
    out = x @ W.T + (alpha / A.shape[0]) * ((x @ A.T) @ B.T)
    return out if bias is None else out + bias


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask):
        B, L, D = x.shape

        def heads(t):
            return t.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        out = (self.drop(weights) @ v).transpose(1, 2).reshape(B, L, D)
        return self.o(out), weights


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.ffn_dim)
        self.ff2 = nn.Linear(cfg.ffn_dim, cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, key_mask):
        a, weights = self.attn(x, key_mask)
        x = self.norm1(x + self.drop(a))
        f = self.ff2(self.drop(F.relu(self.ff1(x))))
        return self.norm2(x + self.drop(f)), weights


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class RhythmModel(nn.Module):
    def __init__(self, config: ModelConfig, n_labels: int = 0):
        super().__init__()
        self.config = config
        self.n_labels = n_labels
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.max_len, d)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)
        if config.use_morphology:
            self.morph = MorphologyEncoder(config.morph_channels, config.morph_feature_dim)
            self.morph_proj = nn.Linear(config.morph_feature_dim, d)
            if config.freeze_morphology:
                for p in self.morph.parameters():
                    p.requires_grad_(False)
        self.emb_drop = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_layers))
        self.mlm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.classifier = nn.Linear(d, n_labels) if n_labels > 0 else None

    # -- embeddings -----------------------------------------------------------
    def morph_features(self, segments) -> torch.Tensor:
        """Feature vectors ``(n, morph_feature_dim)`` for a list of raw segments."""
        x, lengths = pad_batch(segments, dtype=self.tok_emb.weight.dtype)
        return self.morph(x, lengths)

    def embed(self, input_ids: torch.Tensor, segments=None) -> torch.Tensor:
        B, L = input_ids.shape
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len={self.config.max_len}")
        if int(input_ids.max()) >= self.config.vocab_size or int(input_ids.min()) < 0:
            raise ValueError("token id outside the vocabulary")
        pos = torch.arange(L, device=input_ids.device)
        h = self.tok_emb(input_ids) + self.pos_emb(pos)[None]
        if self.config.use_morphology and segments is not None:
            where = [(i, j) for i, row in enumerate(segments) for j, s in enumerate(row[:L]) if s is not None]
            if where:
                feats = self.morph_proj(self.morph_features([segments[i][j] for i, j in where]))
                rows = torch.tensor([i for i, _ in where])
                cols = torch.tensor([j for _, j in where])
                add = torch.zeros_like(h)
                add[rows, cols] = feats
                h = h + add
        return self.emb_drop(h)

    # -- encoder --------------------------------------------------------------
    def encode(self, embedded: torch.Tensor, attention_mask: torch.Tensor, return_attention: bool = False):
        h, maps = embedded, []
        for layer in self.layers:
            h, w = layer(h, attention_mask)
            maps.append(w)
        return (h, maps) if return_attention else h

    def forward(self, input_ids, attention_mask, segments=None, return_attention: bool = False):
        return self.encode(self.embed(input_ids, segments), attention_mask, return_attention)

    # -- heads ----------------------------------------------------------------
    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.tok_emb.weight.T + self.mlm_bias

    def classify(self, hidden: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        if self.classifier is None:
            raise ValueError("model was built without a classification head")
        counts = attention_mask.sum(1, keepdim=True)
        if int(counts.min()) == 0:
            raise ValueError("cannot pool an all-padding sequence")
        m = attention_mask[..., None].to(hidden.dtype)
        return self.classifier((hidden * m).sum(1) / counts.to(hidden.dtype))

    def add_classifier(self, n_labels: int) -> None:
        self.n_labels = n_labels
        self.classifier = nn.Linear(self.config.d_model, n_labels)

    # -- LoRA -----------------------------------------------------------------
    def add_lora(self, rank: int = 8, alpha: float = 16.0) -> list[str]:
        """Wrap every query/value projection; returns the adapted module names."""
        names = []
        for i, layer in enumerate(self.layers):
            for proj in ("q", "v"):
                base = getattr(layer.attn, proj)
                if isinstance(base, LoraLinear):
                    raise ValueError("LoRA adapters already attached")
                setattr(layer.attn, proj, LoraLinear(base, rank, alpha))
                names.append(f"layers.{i}.attn.{proj}")
        return names

    def merge_lora(self) -> None:
        """Fold adapters into plain linear layers."""
        for layer in self.layers:
            for proj in ("q", "v"):
                mod = getattr(layer.attn, proj)
                if isinstance(mod, LoraLinear):
                    lin = nn.Linear(mod.base.in_features, mod.base.out_features, dtype=mod.base.weight.dtype)
                    with torch.no_grad():
                        lin.weight.copy_(mod.merged_weight())
                        lin.bias.copy_(mod.base.bias)
                    setattr(layer.attn, proj, lin)


def batch_tensors(batch) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(batch.input_ids), torch.as_tensor(batch.attention_mask)


def masked_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross-entropy over positions whose label is not the ignore marker."""
    labels = torch.as_tensor(labels)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE)


def base_parameter_snapshot(model: nn.Module) -> dict[str, np.ndarray]:
    """Copies of every non-adapter, non-classifier parameter, keyed by its pre-LoRA name."""
    return {n.replace(".base.", "."): p.detach().cpu().numpy().copy() for n, p in model.named_parameters()
            if "lora_" not in n and not n.startswith("classifier.")}
