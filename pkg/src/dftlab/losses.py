"""Training objectives over per-token log probabilities.

Every loss takes the output of ``Model.token_log_probs`` (or its batched
equivalent), a boolean mask that is True where a token contributes
(response tokens; padding and prompt positions are False), and a
reduction. Inputs may be a single vector (T,) or a padded batch (B, T);
batched losses reduce per sequence first, then average over the batch.

The dynamic variants multiply each token's cross-entropy by a weight the
gradient must not flow through:

* token-level: weight is the token's own probability, detached, so the
  parameter gradient equals the plain cross-entropy gradient scaled by
  p_t per token.
* sequence-level: one detached weight per sequence, the product of its
  token probabilities, computed in log space and exponentiated (the
  product underflows to exactly 0 for long low-probability sequences;
  that behavior is intentional and observable).

The focal baseline's (1-p)^gamma factor is deliberately NOT detached;
that matches the standard focal loss. The asymmetry with the dynamic
losses is the point of the contrast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import LOG_FLOOR, Tensor, exp, mul, scale, stop_gradient, tensor_sum

KINDS = ("sft", "dft_token", "dft_sequence", "focal", "iw_sft")
REDUCTIONS = ("mean", "sum")

DEFAULT_IW_CLIP = 4.0


@dataclass
class LossSpec:
    """Choice of objective plus its knobs.

    ``reference_log_probs`` is runtime data for iw_sft (per-token log
    probs under the data-generating policy); it is never serialized.
    """

    kind: str = "sft"
    gamma: Optional[float] = None
    reduction: str = "mean"
    iw_clip: Optional[float] = None
    reference_log_probs: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}, expected one of {KINDS}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if (self.gamma is not None) != (self.kind == "focal"):
            raise ValueError("gamma must be present exactly when kind == 'focal'")
        if self.gamma is not None and self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.kind == "iw_sft":
            if self.iw_clip is None:
                self.iw_clip = DEFAULT_IW_CLIP
            if self.iw_clip <= 0:
                raise ValueError("iw_clip must be > 0")
        else:
            if self.iw_clip is not None:
                raise ValueError("iw_clip only applies to iw_sft")
            if self.reference_log_probs is not None:
                raise ValueError("reference_log_probs only applies to iw_sft")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "reduction": self.reduction}
        if self.gamma is not None:
            out["gamma"] = self.gamma
        if self.iw_clip is not None:
            out["iw_clip"] = self.iw_clip
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(
            kind=d.get("kind", "sft"),
            gamma=d.get("gamma"),
            reduction=d.get("reduction", "mean"),
            iw_clip=d.get("iw_clip"),
        )


@dataclass
class TokenDiagnostics:
    """Per-token view of what the active loss actually applies.

    w = 1/p is the implicit importance weight hiding in plain
    cross-entropy; effective_weight is the multiplier the chosen loss
    puts on -log p. indicator_reward is 1 for every demonstration token
    by construction.
    """

    p: np.ndarray
    w: np.ndarray
    effective_weight: np.ndarray
    indicator_reward: np.ndarray
    sequence_weight: Optional[float] = None


def _prep_mask(token_log_probs: Tensor, mask) -> np.ndarray:
    if mask is None:
        mask = np.ones(token_log_probs.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != token_log_probs.shape:
        raise ValueError(
            f"mask shape {mask.shape} must match log probs {token_log_probs.shape}"
        )
    counts = mask.sum(axis=-1)
    if np.min(counts) == 0:
        raise ValueError("every sequence needs at least one unmasked token")
    return mask


def _reduce(per_token: Tensor, mask: np.ndarray, reduction: str,
            row_weights: Optional[np.ndarray] = None) -> Tensor:
    """Masked per-sequence reduction, then mean over any batch dimension."""
    contrib = mul(per_token, Tensor(mask.astype(np.float64)))
    row = tensor_sum(contrib, axis=-1)
    if reduction == "mean":
        counts = mask.sum(axis=-1).astype(np.float64)
        row = mul(row, Tensor(1.0 / counts))
    if row_weights is not None:
        row = mul(row, Tensor(row_weights))
    if row.data.ndim == 0:
        return row
    return row.mean()


def sft_loss(token_log_probs: Tensor, mask=None, reduction: str = "mean") -> Tensor:
    """Plain cross-entropy: reduction of -log p_t over unmasked tokens."""
    mask = _prep_mask(token_log_probs, mask)
    return _reduce(scale(token_log_probs, -1.0), mask, reduction)


def dft_token_loss(token_log_probs: Tensor, mask=None, reduction: str = "mean") -> Tensor:
    """Cross-entropy with each token scaled by its own detached probability."""
    mask = _prep_mask(token_log_probs, mask)
    weight = stop_gradient(exp(token_log_probs))
    return _reduce(mul(weight, scale(token_log_probs, -1.0)), mask, reduction)


def dft_sequence_loss(token_log_probs: Tensor, mask=None, reduction: str = "mean") -> Tensor:
    """Cross-entropy scaled by the detached whole-sequence probability."""
    mask = _prep_mask(token_log_probs, mask)
    log_w = np.sum(np.where(mask, token_log_probs.data, 0.0), axis=-1)
    seq_weight = np.exp(log_w)
    base = scale(token_log_probs, -1.0)
    return _reduce(base, mask, reduction, row_weights=seq_weight)


def focal_loss(token_log_probs: Tensor, mask=None, gamma: float = 2.0,
               reduction: str = "mean") -> Tensor:
    """Focal contrast: -(1-p)^gamma log p, the (1-p)^gamma factor differentiable."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    mask = _prep_mask(token_log_probs, mask)
    p = exp(token_log_probs)
    factor = scale(p, -1.0, shift=1.0) ** gamma
    return _reduce(mul(factor, scale(token_log_probs, -1.0)), mask, reduction)


def iw_sft_loss(token_log_probs: Tensor, reference_log_probs, mask=None,
                iw_clip: float = DEFAULT_IW_CLIP, reduction: str = "mean") -> Tensor:
    """Importance-weighted cross-entropy against a reference policy.

    Weight is the detached, clipped probability ratio p/p_ref. This is an
    approximation of the externally defined objective, kept for baseline
    comparisons only.
    """
    ref = np.asarray(reference_log_probs, dtype=np.float64)
    if ref.shape != token_log_probs.shape:
        raise ValueError(
            f"reference log probs shape {ref.shape} must match {token_log_probs.shape}"
        )
    if iw_clip <= 0:
        raise ValueError("iw_clip must be > 0")
    mask = _prep_mask(token_log_probs, mask)
    ratio = np.minimum(np.exp(token_log_probs.data - ref), iw_clip)
    return _reduce(mul(Tensor(ratio), scale(token_log_probs, -1.0)), mask, reduction)


def compute_loss(spec: LossSpec, token_log_probs: Tensor, mask=None,
                 reference_log_probs=None) -> Tensor:
    """Dispatch on spec.kind."""
    if spec.kind == "sft":
        return sft_loss(token_log_probs, mask, spec.reduction)
    if spec.kind == "dft_token":
        return dft_token_loss(token_log_probs, mask, spec.reduction)
    if spec.kind == "dft_sequence":
        return dft_sequence_loss(token_log_probs, mask, spec.reduction)
    if spec.kind == "focal":
        return focal_loss(token_log_probs, mask, spec.gamma, spec.reduction)
    ref = reference_log_probs if reference_log_probs is not None else spec.reference_log_probs
    if ref is None:
        raise ValueError("iw_sft requires reference_log_probs")
    return iw_sft_loss(token_log_probs, ref, mask, spec.iw_clip, spec.reduction)


def diagnostics(token_log_probs, loss_spec: LossSpec) -> TokenDiagnostics:
    """Per-token probabilities, implicit weights, and the active loss weight.

    Expects the log probs of one sequence; the sequence-level weight is
    the product over all provided tokens.
    """
    logp = token_log_probs.data if isinstance(token_log_probs, Tensor) else \
        np.asarray(token_log_probs, dtype=np.float64)
    p = np.exp(logp)
    w = 1.0 / np.maximum(p, LOG_FLOOR)
    seq_weight = None
    if loss_spec.kind == "sft":
        eff = np.ones_like(p)
    elif loss_spec.kind == "dft_token":
        eff = p.copy()
    elif loss_spec.kind == "dft_sequence":
        seq_weight = float(np.exp(np.sum(logp)))
        eff = np.full_like(p, seq_weight)
    elif loss_spec.kind == "focal":
        eff = (1.0 - p) ** loss_spec.gamma
    else:
        if loss_spec.reference_log_probs is None:
            raise ValueError("iw_sft diagnostics require reference_log_probs")
        ratio = np.exp(logp - np.asarray(loss_spec.reference_log_probs))
        eff = np.minimum(ratio, loss_spec.iw_clip)
    return TokenDiagnostics(
        p=p,
        w=w,
        effective_weight=eff,
        indicator_reward=np.ones_like(p),
        sequence_weight=seq_weight,
    )
