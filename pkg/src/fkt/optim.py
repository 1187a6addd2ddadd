"""SGD with momentum and LARS, as functional steps plus torch optimizer wrappers.

Both keep a zero-initialised momentum buffer per parameter:

    SGD:   v <- m * v + (g + wd * w);            w <- w - lr * v
    LARS:  d = g + wd * w
           trust = eta * ||w|| / ||d||   (1 if either norm is zero)
           v <- m * v + lr * trust * d;           w <- w - v

Parameters flagged as excluded (biases, normalisation affine terms) skip
both the trust ratio and weight decay under LARS and take the plain momentum
step ``v <- m * v + lr * g``.
"""
from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import torch
from torch.optim.optimizer import Optimizer

from .errors import DivergenceError, InvalidInput


def _check_finite(grads: Sequence[torch.Tensor]):
    for i, g in enumerate(grads):
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in parameter tensor {i}")


def _check_args(params, grads, lr):
    if len(params) != len(grads):
        raise InvalidInput(f"{len(params)} parameter tensors but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidInput(f"parameter shape {tuple(p.shape)} does not match gradient {tuple(g.shape)}")
    if not lr > 0:
        raise InvalidInput(f"learning rate must be > 0, got {lr}")


@torch.no_grad()
def sgd_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, buffers: Optional[list] = None) -> Sequence[torch.Tensor]:
    """Classical momentum SGD, updating ``params`` (and ``buffers``) in place."""
    _check_args(params, grads, lr)
    _check_finite(grads)
    if buffers is None:
        buffers = [None] * len(params)
    for i, (w, g) in enumerate(zip(params, grads)):
        d = g + weight_decay * w if weight_decay else g.clone()
        if momentum:
            if buffers[i] is None:
                buffers[i] = torch.zeros_like(w)
            buffers[i].mul_(momentum).add_(d)
            d = buffers[i]
        w.sub_(lr * d)
    return params


@torch.no_grad()
def lars_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], lr: float, momentum: float = 0.9,
              weight_decay: float = 1e-6, trust_coefficient: float = 0.001, excluded: Optional[Sequence[bool]] = None,
              buffers: Optional[list] = None) -> Sequence[torch.Tensor]:
    """Layer-wise adaptive rate scaling step, updating ``params`` in place."""
    _check_args(params, grads, lr)
    _check_finite(grads)
    if excluded is None:
        excluded = [False] * len(params)
    if buffers is None:
        buffers = [None] * len(params)
    for i, (w, g) in enumerate(zip(params, grads)):
        if excluded[i]:
            step = lr * g
        else:
            d = g + weight_decay * w
            w_norm = torch.linalg.vector_norm(w)
            d_norm = torch.linalg.vector_norm(d)
            if w_norm > 0 and d_norm > 0:
                local_lr = trust_coefficient * w_norm / d_norm
            else:
                local_lr = torch.ones((), dtype=w.dtype, device=w.device)
            step = lr * local_lr * d
        if momentum:
            if buffers[i] is None:
                buffers[i] = torch.zeros_like(w)
            buffers[i].mul_(momentum).add_(step)
            step = buffers[i]
        w.sub_(step)
    return params


def is_excluded(name: str, param: torch.Tensor) -> bool:
    """Biases and normalisation parameters (all 1-d tensors) are excluded from LARS adaptation."""
    return param.ndim <= 1 or name.endswith(".bias")


class _BufferedOptimizer(Optimizer):
    def _collect(self, group):
        params, grads, bufs = [], [], []
        for p in group["params"]:
            if p.grad is None:
                continue
            params.append(p)
            grads.append(p.grad)
            bufs.append(self.state[p].get("momentum_buffer"))
        return params, grads, bufs

    def _store(self, params, bufs):
        for p, b in zip(params, bufs):
            if b is not None:
                self.state[p]["momentum_buffer"] = b


class SGD(_BufferedOptimizer):
    def __init__(self, params: Iterable, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr > 0:
            raise InvalidInput(f"learning rate must be > 0, got {lr}")
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            params, grads, bufs = self._collect(group)
            sgd_step(params, grads, group["lr"], group["momentum"], group["weight_decay"], bufs)
            self._store(params, bufs)


class LARS(_BufferedOptimizer):
    """LARS over param groups; groups with ``exclude=True`` take the plain momentum step.

    Use ``lars_param_groups`` to split a model's parameters.
    """

    def __init__(self, params: Iterable, lr: float, momentum: float = 0.9, weight_decay: float = 1e-6,
                 trust_coefficient: float = 0.001):
        if not lr > 0:
            raise InvalidInput(f"learning rate must be > 0, got {lr}")
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                                      trust_coefficient=trust_coefficient, exclude=False))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            params, grads, bufs = self._collect(group)
            lars_step(params, grads, group["lr"], group["momentum"], group["weight_decay"],
                      group["trust_coefficient"], [group["exclude"]] * len(params), bufs)
            self._store(params, bufs)


def lars_param_groups(named_params) -> list:
    adapted, excluded = [], []
    for name, p in named_params:
        if p.requires_grad:
            (excluded if is_excluded(name, p) else adapted).append(p)
    return [{"params": adapted, "exclude": False}, {"params": excluded, "exclude": True}]


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / total_epochs))
