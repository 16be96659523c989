"""Training objectives: token cross-entropy over per-scale residual
logits, differentiable cumulative full-scale latent prediction, the
consistency loss that aligns those cumulative predictions with the
quantized full-scale targets, and their weighted total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec as cd
from .ndcore import Tensor, log_softmax, matmul, softmax, take_last_axis
from .ndcore import tensor as T


@dataclass
class LossBreakdown:
    ce: float
    consistency: float
    total: float
    per_scale_ce: list[float]
    per_scale_consistency: list[float]
    weight: float
    ce_sum: float  # unnormalized sum over scales and positions

    def validate(self):
        if not np.isfinite([self.ce, self.consistency, self.total]).all():
            raise FloatingPointError(f"non-finite loss: {self}")
        if abs(self.total - (self.ce + self.weight * self.consistency)) > 1e-6:
            raise AssertionError("total != ce + weight * consistency")


def token_cross_entropy(logits_per_scale: list[Tensor], targets_per_scale: list[np.ndarray]):
    """Negative log-likelihood of the target token at every position.

    Returns (mean, per_scale_means, unnormalized_sum); the per-token mean
    drives optimization so the consistency weight keeps one meaning
    across schedules.
    """
    if len(logits_per_scale) != len(targets_per_scale):
        raise T.ShapeError(
            f"cross_entropy: {len(logits_per_scale)} logit scales vs {len(targets_per_scale)} target scales"
        )
    per_scale = []
    total_sum = None
    n_tokens = 0
    batch = logits_per_scale[0].shape[0]
    for logits, tgt in zip(logits_per_scale, targets_per_scale):
        tgt = np.asarray(tgt).reshape(logits.shape[0], -1)
        vocab = logits.shape[-1]
        if tgt.min() < 0 or tgt.max() >= vocab:
            raise ValueError(f"cross_entropy: target index out of range [0, {vocab})")
        logp = take_last_axis(log_softmax(logits), tgt)  # (B, N)
        s = -logp.sum()
        per_scale.append(s * (1.0 / logp.data.size))
        total_sum = s if total_sum is None else total_sum + s
        n_tokens += tgt.shape[1]
    mean = total_sum * (1.0 / (batch * n_tokens))
    return mean, per_scale, total_sum


def cumulative_prediction(
    probs_per_scale: list[Tensor],
    codebook: cd.Codebook,
    schedule: cd.ScaleSchedule,
    k: int,
) -> Tensor:
    """Soft cumulative latent at scale k (1-based): the probability-
    weighted codebook embedding of every coarser scale, upsampled to
    (H_k, W_k) and summed. Differentiable in the logits; collapses to the
    hard reconstruction for one-hot rows."""
    if not 1 <= k <= len(probs_per_scale):
        raise ValueError(f"cumulative_prediction: scale {k} outside 1..{len(probs_per_scale)}")
    hw = schedule.resolutions[k - 1]
    out = None
    for m in range(k):
        p = probs_per_scale[m]
        rows = p.data.sum(axis=-1)
        if np.abs(rows - 1.0).max() > 1e-4:
            raise ValueError("cumulative_prediction: probability rows must sum to 1 within 1e-4")
        b, n, _ = p.shape
        h, w = schedule.resolutions[m]
        soft = matmul(p, Tensor(codebook.entries.astype(p.dtype)))  # (B, N, C)
        spatial = soft.transpose(0, 2, 1).reshape(b, soft.shape[-1], h, w)
        if (h, w) != hw:
            rh, rw = cd.resize_matrices((h, w), hw, "bilinear")
            spatial = matmul(matmul(Tensor(rh.astype(p.dtype)), spatial), Tensor(rw.T.astype(p.dtype)))
        out = spatial if out is None else out + spatial
    return out


def consistency_loss(
    cumulative_preds: list[Tensor],
    target_tokens: list[np.ndarray],
    codebook: cd.Codebook,
):
    """Squared error between each cumulative latent prediction and the
    embedded full-scale target, normalized per scale by C*H_k*W_k (and
    batch), summed over scales. Returns (total, per_scale)."""
    if len(cumulative_preds) != len(target_tokens):
        raise T.ShapeError(
            f"consistency_loss: {len(cumulative_preds)} predictions vs {len(target_tokens)} target scales"
        )
    per_scale = []
    total = None
    for pred, toks in zip(cumulative_preds, target_tokens):
        toks = np.asarray(toks)
        if toks.ndim == 2:
            toks = toks[None]
        ref = codebook.entries[toks].transpose(0, 3, 1, 2).astype(pred.dtype)  # (B, C, H, W)
        if ref.shape != pred.shape:
            raise T.ShapeError(f"consistency_loss: prediction {pred.shape} vs target {ref.shape}")
        d = pred - Tensor(ref)
        term = (d * d).sum() * (1.0 / (pred.data.size / pred.shape[0]) / pred.shape[0])
        per_scale.append(term)
        total = term if total is None else total + term
    return total, per_scale


def total_loss(ce: Tensor, consistency: Tensor | None, weight: float):
    """weight >= 0; total = ce + weight * consistency."""
    if weight < 0:
        raise ValueError(f"total_loss: weight must be non-negative, got {weight}")
    if consistency is None or weight == 0.0:
        return ce
    return ce + weight * consistency


def soft_probs(logits_per_scale: list[Tensor], stop_gradient: bool = False) -> list[Tensor]:
    """Row-stochastic token distributions from per-scale logits."""
    out = []
    for lg in logits_per_scale:
        out.append(softmax(lg.detach() if stop_gradient else lg))
    return out


def straight_through_cumulative(
    soft_cums: list[Tensor],
    hard_cums: list[np.ndarray],
) -> list[Tensor]:
    """Straight-through cumulative predictions: the forward value is the
    hard-token cumulative latent while gradients flow through the soft
    expectation. With one-hot distributions the two coincide and this is
    the identity."""
    if len(soft_cums) != len(hard_cums):
        raise T.ShapeError(
            f"straight_through: {len(soft_cums)} soft vs {len(hard_cums)} hard scales"
        )
    out = []
    for soft, hard in zip(soft_cums, hard_cums):
        hard = np.asarray(hard, dtype=soft.dtype)
        if hard.shape != soft.shape:
            raise T.ShapeError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")
        out.append(soft + Tensor(hard - soft.data))
    return out


def breakdown(
    ce_mean: Tensor,
    per_scale_ce: list[Tensor],
    ce_sum: Tensor,
    cons_total: Tensor | None,
    per_scale_cons: list[Tensor],
    weight: float,
) -> LossBreakdown:
    ce = float(ce_mean.data)
    cons = float(cons_total.data) if cons_total is not None else 0.0
    out = LossBreakdown(
        ce=ce,
        consistency=cons,
        total=ce + weight * cons,
        per_scale_ce=[float(t.data) for t in per_scale_ce],
        per_scale_consistency=[float(t.data) for t in per_scale_cons],
        weight=weight,
        ce_sum=float(ce_sum.data),
    )
    out.validate()
    return out
