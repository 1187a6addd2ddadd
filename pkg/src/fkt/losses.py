"""Contrastive, supervised and joint training objectives.

All functions accept torch tensors of any floating dtype and keep the
autograd graph intact, so they are used directly in the training loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateEmbedding, InvalidInput


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    reduction: str = "mean"

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidInput(f"temperature must be > 0, got {self.temperature}")
        if self.reduction not in ("mean", "sum"):
            raise InvalidInput(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass(frozen=True)
class LossBreakdown:
    ssl_loss: float
    ce_loss: float
    fkt_loss: float
    lam: float


def cosine_similarity_matrix(z: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities of the rows of ``z`` (shape 2N x d).

    Rows are L2-normalised first, so the diagonal is 1 up to rounding.
    """
    if z.ndim != 2 or z.shape[0] < 2:
        raise InvalidInput(f"expected a (2N, d) matrix with 2N >= 2, got shape {tuple(z.shape)}")
    if not torch.isfinite(z).all():
        raise DegenerateEmbedding("embedding contains non-finite values")
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        bad = torch.nonzero(norms.squeeze(1) == 0).flatten().tolist()
        raise DegenerateEmbedding(f"zero-norm embedding rows: {bad}")
    unit = z / norms
    return unit @ unit.T


def nt_xent(z_a: torch.Tensor, z_b: torch.Tensor, cfg: ContrastiveConfig | None = None) -> torch.Tensor:
    """Normalised temperature-scaled cross entropy over 2N anchors.

    Row i of ``z_a`` and row i of ``z_b`` are the two views of sample i. Every
    one of the 2N rows acts as an anchor whose positive is its sibling view;
    the softmax denominator runs over the other 2N - 1 rows (self excluded,
    positive included).
    """
    cfg = cfg or ContrastiveConfig()
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise InvalidInput(f"view embeddings must share a 2-D shape, got {tuple(z_a.shape)} and {tuple(z_b.shape)}")
    n = z_a.shape[0]
    if n < 1:
        raise InvalidInput("need at least one pair")

    z = torch.cat([z_a, z_b], dim=0)
    logits = cosine_similarity_matrix(z) / cfg.temperature
    self_mask = torch.eye(2 * n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))

    idx = torch.arange(2 * n, device=z.device)
    positives = torch.cat([idx[n:], idx[:n]])
    # log-sum-exp with per-anchor max subtraction
    row_max = logits.max(dim=1, keepdim=True).values.detach()
    shifted = logits - row_max
    log_denominator = torch.log(torch.exp(shifted).sum(dim=1)) + row_max.squeeze(1)
    terms = log_denominator - logits[idx, positives]
    # the positive is part of the denominator, so each term is >= 0 up to rounding
    terms = terms.clamp_min(0.0)
    return terms.mean() if cfg.reduction == "mean" else terms.sum()


def contrastive_accuracy(z_a: torch.Tensor, z_b: torch.Tensor) -> float:
    """Fraction of the 2N anchors whose most similar other row is their positive."""
    n = z_a.shape[0]
    with torch.no_grad():
        sim = cosine_similarity_matrix(torch.cat([z_a, z_b], dim=0))
        sim.fill_diagonal_(float("-inf"))
        idx = torch.arange(2 * n, device=sim.device)
        positives = torch.cat([idx[n:], idx[:n]])
        return (sim.argmax(dim=1) == positives).double().mean().item()


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InvalidInput(f"logits must be (N, C) with C >= 2, got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0],):
        raise InvalidInput(f"labels shape {tuple(labels.shape)} does not match {logits.shape[0]} logits rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InvalidInput(f"labels must lie in [0, {logits.shape[1]})")
    log_probs = F.log_softmax(logits, dim=1)
    return -log_probs.gather(1, labels.long().unsqueeze(1)).squeeze(1).mean()


def fkt_loss(ssl, ce, lam: float = 1.0) -> LossBreakdown:
    """Combine scalar losses into ``ce + lam * ssl``.

    Accepts floats or 0-d tensors; the returned breakdown holds python floats.
    Use ``joint_objective`` for the differentiable version.
    """
    ssl_f, ce_f, lam_f = float(ssl), float(ce), float(lam)
    if not all(math.isfinite(v) for v in (ssl_f, ce_f, lam_f)):
        raise InvalidInput(f"non-finite loss component: ssl={ssl_f}, ce={ce_f}, lambda={lam_f}")
    if lam_f < 0:
        raise InvalidInput(f"lambda must be >= 0, got {lam_f}")
    return LossBreakdown(ssl_loss=ssl_f, ce_loss=ce_f, fkt_loss=ce_f + lam_f * ssl_f, lam=lam_f)


def joint_objective(ssl: torch.Tensor, ce: torch.Tensor, lam: float) -> torch.Tensor:
    return ce + lam * ssl
