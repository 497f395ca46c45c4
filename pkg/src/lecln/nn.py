"""Small differentiable-computation layer used by the LE-CLN blocks.

Tensors are ``torch.Tensor`` and reverse-mode gradients come from torch's
autograd; this module pins down the handful of primitives the model uses,
the parameter initialization, a functional Adam, the step learning-rate
schedule and a finite-difference gradient checker.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor


# --- primitives -------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``W x + b`` applied to the last axis of ``x``; ``W`` has shape (out, in)."""
    if W.dim() != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"affine shape mismatch: x {tuple(x.shape)}, W {tuple(W.shape)}")
    if b is not None and b.shape != (W.shape[0],):
        raise ValueError(f"affine bias shape {tuple(b.shape)} != ({W.shape[0]},)")
    return F.linear(x, W, b)


def conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C_in x H x W, or batched) with ``kernels`` (C_out x C_in x k x k)."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 4 or kernels.dim() != 4 or x.shape[1] != kernels.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x {tuple(x.shape)}, kernels {tuple(kernels.shape)}")
    kh, kw = kernels.shape[-2:]
    oh = conv_out_size(x.shape[2], kh, stride, padding)
    ow = conv_out_size(x.shape[3], kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output dims non-positive: ({oh}, {ow})")
    y = F.conv2d(x, kernels, bias, stride=stride, padding=padding)
    return y[0] if single else y


_kink_log: Optional[list] = None


@contextlib.contextmanager
def kink_monitor():
    """Record the sign pattern of every ReLU input evaluated inside the block."""
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def relu(x: Tensor) -> Tensor:
    if _kink_log is not None:
        _kink_log.append((x.detach() > 0).flatten().clone())
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def concat(xs: Sequence[Tensor], dim: int = -1) -> Tensor:
    return torch.cat(list(xs), dim=dim)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"elementwise product shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a * b


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters the loss does not depend on get zero gradients.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    params = list(params)
    if not loss.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# --- parameters ---------------------------------------------------------------

def glorot_uniform(shape: Sequence[int], gen: torch.Generator, dtype=torch.float32) -> Tensor:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)); conv kernels count the receptive field."""
    shape = tuple(shape)
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=dtype) * 2 - 1) * bound


# --- optimizer ----------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-3
    milestones: tuple[int, ...] = (80, 120, 150, 180)
    decay: float = 0.3
    epochs: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if self.milestones and self.milestones[-1] >= self.epochs:
            raise ValueError(f"milestone {self.milestones[-1]} not below epochs={self.epochs}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr0 * cfg.decay ** passed


@dataclass
class AdamState:
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Iterable[Tensor]) -> "AdamState":
        params = list(params)
        return cls(m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params], t=0)


def adam_step(params: Sequence[Tensor], grads: Sequence[Tensor], state: AdamState, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``; returns the new state."""
    if t < 1:
        raise ValueError("Adam step index t must be >= 1")
    m_new, v_new = [], []
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            p -= lr * (m / c1) / (torch.sqrt(v / c2) + eps)
            m_new.append(m)
            v_new.append(v)
    return AdamState(m=m_new, v=v_new, t=t)


# --- gradient check -------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int


def _masks_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
              max_coords: int = 64, seed: int = 0, floor: float = 1e-6) -> GradCheckResult:
    """Compare autograd against central differences for a scalar ``fn()``.

    ``tensors`` must be float64 leaves with ``requires_grad``.  At most
    ``max_coords`` random coordinates are probed per tensor.  A coordinate is
    skipped when the +h and -h probes see different ReLU activation patterns,
    i.e. when a pre-activation lies within h of a kink.  The relative error is
    ``|g_a - g_n| / max(|g_a|, |g_n|, floor)``.
    """
    tensors = list(tensors)
    loss = fn()
    analytic = backward(loss, tensors)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    with torch.no_grad():
        for p, g in zip(tensors, analytic):
            flat = p.view(-1)
            n = flat.numel()
            coords = rng.choice(n, size=min(n, max_coords), replace=False)
            for c in coords:
                orig = flat[c].item()
                flat[c] = orig + h
                with kink_monitor() as plus_masks:
                    f_plus = fn().item()
                flat[c] = orig - h
                with kink_monitor() as minus_masks:
                    f_minus = fn().item()
                flat[c] = orig
                if not _masks_equal(plus_masks, minus_masks):
                    skipped += 1
                    continue
                numeric = (f_plus - f_minus) / (2 * h)
                a = g.view(-1)[c].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, rel)
                checked += 1
    return GradCheckResult(max_rel_error=worst, checked=checked, skipped_kinks=skipped)
