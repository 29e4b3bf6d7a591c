"""Optimizer, learning-rate schedule, early stopping and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DivergenceError


@dataclass(frozen=True)
class TrainHyper:
    """Hyperparameters shared by every training loop.

    Use the ``for_ae``/``for_mlm``/``for_finetune`` constructors for the
    per-stage defaults.  ``warmup_fraction=None`` disables the schedule and
    keeps the learning rate constant at ``peak_lr``.
    """

    max_epochs: int = 30
    batch_size: int = 64
    peak_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_fraction: float | None = None
    patience: int = 10
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if self.warmup_fraction is not None and not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction", "must lie in [0, 1)")
        if self.patience < 1:
            raise ConfigError("patience", "must be >= 1")

    @classmethod
    def for_ae(cls, **kw) -> "TrainHyper":
        return cls(**{"max_epochs": 30, "weight_decay": 1e-4, **kw})

    @classmethod
    def for_mlm(cls, **kw) -> "TrainHyper":
        return cls(**{"max_epochs": 100, "weight_decay": 3e-4, "warmup_fraction": 0.1, **kw})

    @classmethod
    def for_finetune(cls, **kw) -> "TrainHyper":
        return cls(**{"max_epochs": 100, "weight_decay": 1e-4, "warmup_fraction": 0.1, **kw})


def adamw_step(param: torch.Tensor, grad: torch.Tensor, state: dict, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8, name: str = "param") -> None:
    """One in-place AdamW update with decoupled weight decay.

    ``state`` holds ``step``, ``exp_avg`` and ``exp_avg_sq`` and is created
    on first use.
    """
    if not torch.isfinite(grad).all():
        raise DivergenceError(f"non-finite gradient for {name}")
    b1, b2 = betas
    if not state:
        state["step"] = 0
        state["exp_avg"] = torch.zeros_like(param)
        state["exp_avg_sq"] = torch.zeros_like(param)
    state["step"] += 1
    t = state["step"]
    m, v = state["exp_avg"], state["exp_avg_sq"]
    with torch.no_grad():
        m.mul_(b1).add_(grad, alpha=1 - b1)
        v.mul_(b2).addcmul_(grad, grad, value=1 - b2)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        param.mul_(1 - lr * weight_decay)
        param.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class AdamW:
    """Minimal AdamW over named parameters; the learning rate is set per step."""

    def __init__(self, named_params, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [(n, p) for n, p in named_params if p.requires_grad]
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict[str, dict] = {n: {} for n, _ in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for n, p in self.params:
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad, self.state[n], lr, self.weight_decay, self.betas, self.eps, name=n)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = float(torch.sqrt(sum((g.double() ** 2).sum() for g in grads)))
    if not math.isfinite(total):
        raise DivergenceError("non-finite gradient norm")
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total


def cosine_warmup_lr(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        return peak_lr
    step = min(max(step, 0), total_steps)
    warmup = warmup_fraction * total_steps
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    remaining = total_steps - warmup
    progress = (step - warmup) / remaining if remaining > 0 else 1.0
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(hyper: TrainHyper, step: int, total_steps: int) -> float:
    if hyper.warmup_fraction is None:
        return hyper.peak_lr
    return cosine_warmup_lr(step, total_steps, hyper.peak_lr, hyper.warmup_fraction)


class EarlyStopping:
    """Tracks the best metric; ``stop`` turns true after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError("mode must be 'min' or 'max'")
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        better = self.best is None or (value < self.best if self.mode == "min" else value > self.best)
        if better:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return better

    @property
    def stop(self) -> bool:
        return self.bad_epochs >= self.patience


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"loss became non-finite during {where}")


def gradient_check(loss_fn, params: list[torch.Tensor], h: float = 1e-5) -> float:
    """Largest per-tensor relative error between autograd and central differences.

    ``loss_fn`` must be a deterministic closure returning a scalar tensor;
    ``params`` should be float64 leaf tensors with ``requires_grad``.
    The error for each tensor is ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)``
    using L2 norms over the tensor.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, ga in zip(params, analytic):
            gn = torch.zeros_like(p)
            flat, gflat = p.view(-1), gn.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            denom = max(float(ga.norm()), float(gn.norm()), 1e-8)
            worst = max(worst, float((ga - gn).norm()) / denom)
    return worst


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
