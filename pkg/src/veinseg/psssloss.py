"""Partial-supervision losses over a three-way pixel partition.

A partially annotated patch pins down only the two coarse vein orders. Its
pixels split into: S1, the annotated V1/V2 pixels, supervised directly; S2,
unannotated pixels the weak branch confidently calls background or fine vein,
supervised by that pseudo-label; and S3, everything else. S3 pixels are, by
the exhaustiveness of the partial annotation, not V1/V2 and not confidently
anything, so an exclusion loss pushes probability mass off the three excluded
channels and toward the fine-vein class without naming a target.

All losses average per patch, then across the batch; an empty pixel set
contributes exactly 0. Pseudo-labels are constants: no gradient reaches the
branch that produced them.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import torch
import torch.nn.functional as F

from .core import BACKGROUND, NUM_CLASSES, V1, V2, V3

# Channels an S3 pixel is pushed away from: everything but the fine-vein class.
EXCLUSION_VECTOR = (1.0, 1.0, 1.0, 0.0)


@dataclass(frozen=True)
class PsssConfig:
    tau: float = 0.95
    lambda_p: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie strictly inside (0, 1), got {self.tau}")
        if self.lambda_p < 0:
            raise ValueError(f"lambda_p must be >= 0, got {self.lambda_p}")


class Provenance(IntEnum):
    GROUND_TRUTH = 0
    CONFIDENT_PSEUDO = 1
    UNCERTAIN = 2


def _batched_logits(logits: torch.Tensor) -> torch.Tensor:
    if logits.ndim == 3:
        logits = logits.unsqueeze(0)
    if logits.ndim != 4 or logits.shape[1] != NUM_CLASSES:
        raise ValueError(f"expected (N, {NUM_CLASSES}, H, W) logits, got {tuple(logits.shape)}")
    return logits


def _batched_labels(labels: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.is_tensor(labels):
        labels = torch.as_tensor(labels)
    if labels.ndim == 2:
        labels = labels.unsqueeze(0)
    if labels.ndim != 3:
        raise ValueError(f"expected (N, H, W) {name}, got {tuple(labels.shape)}")
    return labels.long()


@dataclass(frozen=True)
class PseudoLabel:
    """Per-pixel argmax class and its probability under the weak-branch output."""

    cls: torch.Tensor   # (N, H, W) long
    conf: torch.Tensor  # (N, H, W) float in [0, 1]

    @classmethod
    def from_logits(cls, logits: torch.Tensor) -> "PseudoLabel":
        logits = _batched_logits(logits).detach()
        probs = F.softmax(logits, dim=1)
        conf, hard = probs.max(dim=1)
        return cls(cls=hard, conf=conf)


@dataclass(frozen=True)
class PixelSetPartition:
    """Disjoint boolean masks covering every pixel of the batch."""

    s1: torch.Tensor
    s2: torch.Tensor
    s3: torch.Tensor

    def __post_init__(self) -> None:
        if self.s1.shape != self.s2.shape or self.s1.shape != self.s3.shape:
            raise ValueError("partition masks must share shape")

    @property
    def counts(self) -> tuple[int, int, int]:
        return int(self.s1.sum()), int(self.s2.sum()), int(self.s3.sum())

    def provenance(self) -> torch.Tensor:
        out = torch.full(self.s1.shape, int(Provenance.UNCERTAIN), dtype=torch.uint8)
        out[self.s2] = int(Provenance.CONFIDENT_PSEUDO)
        out[self.s1] = int(Provenance.GROUND_TRUTH)
        return out


def partition_pixels(
    partial: torch.Tensor, pseudo: PseudoLabel, cfg: PsssConfig
) -> PixelSetPartition:
    """Split a patch's pixels into S1 (annotated), S2 (confident pseudo), S3.

    S2 only ever holds background/fine-vein pseudo-labels above the threshold
    (strict >); annotated pixels stay in S1 no matter how confident the
    pseudo-label is. Confident V1/V2 pseudo-labels outside the annotation
    contradict its exhaustiveness and land in S3.
    """
    partial = _batched_labels(partial, "partial labels")
    if partial.shape != pseudo.cls.shape:
        raise ValueError(
            f"partial labels shape {tuple(partial.shape)} != pseudo shape {tuple(pseudo.cls.shape)}"
        )
    s1 = (partial == V1) | (partial == V2)
    confident = ((pseudo.cls == BACKGROUND) | (pseudo.cls == V3)) & (pseudo.conf > cfg.tau)
    s2 = ~s1 & confident
    s3 = ~(s1 | s2)
    return PixelSetPartition(s1=s1, s2=s2, s3=s3)


def _masked_patch_mean(per_pixel: torch.Tensor, sel: torch.Tensor) -> torch.Tensor:
    # Mean over the selected pixels of each patch, then mean over patches;
    # a patch with an empty selection contributes exactly 0.
    num = (per_pixel * sel).sum(dim=(1, 2))
    den = sel.sum(dim=(1, 2)).clamp(min=1)
    return (num / den).mean()


def loss_partial_supervised(
    logits_strong: torch.Tensor, partial: torch.Tensor, part: PixelSetPartition
) -> torch.Tensor:
    """Cross-entropy against the annotated V1/V2 labels, averaged over S1."""
    logits = _batched_logits(logits_strong)
    partial = _batched_labels(partial, "partial labels")
    target = torch.where(part.s1, partial, torch.zeros_like(partial))
    logp = F.log_softmax(logits, dim=1)
    ce = -logp.gather(1, target.unsqueeze(1)).squeeze(1)
    return _masked_patch_mean(ce, part.s1.to(ce.dtype))


def loss_pseudo(
    logits_strong: torch.Tensor, pseudo: PseudoLabel, part: PixelSetPartition
) -> torch.Tensor:
    """Cross-entropy against confident pseudo-labels, averaged over S2."""
    logits = _batched_logits(logits_strong)
    target = torch.where(part.s2, pseudo.cls, torch.zeros_like(pseudo.cls))
    logp = F.log_softmax(logits, dim=1)
    ce = -logp.gather(1, target.unsqueeze(1)).squeeze(1)
    return _masked_patch_mean(ce, part.s2.to(ce.dtype))


def loss_exclusion(logits_strong: torch.Tensor, part: PixelSetPartition) -> torch.Tensor:
    """Mean over S3 of e . log(1 + p): mass on any non-V3 channel is penalized,
    so the infimum sits at a one-hot fine-vein prediction."""
    logits = _batched_logits(logits_strong)
    probs = F.softmax(logits, dim=1)
    e = torch.tensor(EXCLUSION_VECTOR, dtype=probs.dtype, device=probs.device).view(1, -1, 1, 1)
    per_pixel = (e * torch.log1p(probs)).sum(dim=1)
    return _masked_patch_mean(per_pixel, part.s3.to(per_pixel.dtype))


def loss_partial_total(
    logits_strong: torch.Tensor,
    partial: torch.Tensor,
    pseudo: PseudoLabel,
    cfg: PsssConfig,
) -> tuple[torch.Tensor, dict]:
    """Unweighted sum of the three losses plus a per-component breakdown.

    The lambda weight is the trainer's business, applied where the total joins
    the host objective, never here.
    """
    part = partition_pixels(partial, pseudo, cfg)
    ls = loss_partial_supervised(logits_strong, partial, part)
    lu = loss_pseudo(logits_strong, pseudo, part)
    lc = loss_exclusion(logits_strong, part)
    total = ls + lu + lc
    n1, n2, n3 = part.counts
    components = {
        "loss_ps": float(ls.detach()),
        "loss_pu": float(lu.detach()),
        "loss_pc": float(lc.detach()),
        "s1": n1,
        "s2": n2,
        "s3": n3,
    }
    return total, components
