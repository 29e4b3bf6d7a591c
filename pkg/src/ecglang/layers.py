"""Length-aware building blocks for right-padded 1-D batches.

Padded positions are zeroed after every block and excluded from batch-norm
statistics and pooling, so a segment encodes identically alone or padded in
a batch.
"""

from __future__ import annotations

import torch
from torch import nn


def length_mask(lengths: torch.Tensor, size: int) -> torch.Tensor:
    """Boolean (B, size) mask, true at valid positions."""
    return torch.arange(size, device=lengths.device)[None, :] < lengths[:, None]


def strided_lengths(lengths: torch.Tensor, stride: int) -> torch.Tensor:
    # kernel 7 / padding 3 convolutions give ceil(L / stride) outputs
    return torch.div(lengths + stride - 1, stride, rounding_mode="floor")


class MaskedBatchNorm1d(nn.Module):
    """Batch norm over (batch, time) restricted to valid positions."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(num_features))
        self.bias = nn.Parameter(torch.zeros(num_features))
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask[:, None, :].to(x.dtype)
        if self.training:
            count = m.sum().clamp_min(1.0)
            mean = (x * m).sum(dim=(0, 2)) / count
            var = (((x - mean[None, :, None]) * m) ** 2).sum(dim=(0, 2)) / count
            with torch.no_grad():
                unbiased = var * count / (count - 1).clamp_min(1.0)
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean.to(self.running_mean.dtype))
                self.running_var.mul_(1 - self.momentum).add_(self.momentum * unbiased.to(self.running_var.dtype))
        else:
            mean, var = self.running_mean, self.running_var
        y = (x - mean[None, :, None]) / torch.sqrt(var[None, :, None] + self.eps)
        return (y * self.weight[None, :, None] + self.bias[None, :, None]) * m


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask[:, None, :].to(x.dtype)
    return (x * m).sum(-1) / m.sum(-1).clamp_min(1.0)


def masked_max(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x.masked_fill(~mask[:, None, :], float("-inf")).amax(-1)


def pad_batch(arrays, max_len: int | None = None, dtype=torch.float32):
    """Right-pad 1-D arrays into ``(B, L)`` plus a lengths tensor."""
    lengths = torch.tensor([len(a) for a in arrays], dtype=torch.long)
    size = int(lengths.max()) if max_len is None else max_len
    out = torch.zeros(len(arrays), size, dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = torch.as_tensor(a, dtype=dtype)
    return out, lengths
