"""Training objectives.

Incremental phases are treated as two-population long-tail problems: the
replayed exemplars (old classes) versus the incoming data (new classes).
The adjusted cross-entropy adds tau * log(prior) offsets to the cosine
logits inside the loss. Dual distillation keeps the student aligned with
the previous-phase teacher at the feature level (cosine) and at the
spatial-attention level (L1 between normalized Grad-CAM maps).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, InputError

NORM_EPS = 1e-8


@dataclass(frozen=True)
class PriorPair:
    """The two class priors of an incremental phase.

    pi_old = |E| / (|E| + |D|) over sample counts; pi_old + pi_new = 1.
    `old_empty` flags |E| = 0, where log(pi_old) is undefined downstream.
    """

    pi_old: float
    pi_new: float
    old_empty: bool = False


@dataclass(frozen=True)
class LossWeights:
    """Scaling knobs of the total objective."""

    tau: float = 1.0
    lambda_base: float = 10.0
    gamma: float = 0.1
    distill_scope: str = "exemplars_only"  # or "all_samples"

    def __post_init__(self):
        if self.tau < 0 or self.lambda_base < 0 or self.gamma < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.distill_scope not in ("exemplars_only", "all_samples"):
            raise ConfigurationError(
                f"distill_scope must be 'exemplars_only' or 'all_samples', got {self.distill_scope!r}"
            )


def class_priors(num_exemplars: int, num_new: int) -> PriorPair:
    """Priors from the sample counts of the replay set and the new data."""
    if num_exemplars < 0 or num_new <= 0:
        raise InputError(
            f"need num_exemplars >= 0 and num_new > 0, got {num_exemplars}, {num_new}"
        )
    total = num_exemplars + num_new
    return PriorPair(
        pi_old=num_exemplars / total,
        pi_new=num_new / total,
        old_empty=num_exemplars == 0,
    )


def logit_offsets(priors: PriorPair, old_class_count: int, num_classes: int,
                  tau: float, dtype=torch.float32) -> torch.Tensor:
    """Per-class offset vector tau * log(pi_y); old classes first."""
    if old_class_count > num_classes:
        raise InputError("old_class_count exceeds num_classes")
    if priors.old_empty and old_class_count > 0:
        raise ConfigurationError(
            "logit adjustment with old classes requires a nonzero exemplar count"
        )
    offsets = torch.empty(num_classes, dtype=dtype)
    offsets[:old_class_count] = tau * math.log(priors.pi_old) if old_class_count else 0.0
    offsets[old_class_count:] = tau * math.log(priors.pi_new)
    return offsets


def adjusted_ce(logits: torch.Tensor, labels: torch.Tensor, priors: PriorPair,
                old_class_count: int, tau: float) -> torch.Tensor:
    """Cross-entropy over logits shifted by tau * log(pi_y).

    Old classes occupy columns [0, old_class_count). `labels` may be class
    indices (B,) or soft distributions (B, K), e.g. after mixup. With tau = 0
    this is exactly standard cross-entropy. The base phase must use tau = 0.
    """
    if tau == 0:
        return F.cross_entropy(logits, labels)
    if old_class_count == 0:
        raise ConfigurationError("base phase (no old classes) must call with tau=0")
    offs = logit_offsets(priors, old_class_count, logits.shape[1], tau, dtype=logits.dtype)
    return F.cross_entropy(logits + offs.to(logits.device), labels)


def feature_distill_per_sample(teacher_feats: torch.Tensor, student_feats: torch.Tensor) -> torch.Tensor:
    """1 - cosine(teacher, student) per sample, both L2-normalized; in [0, 2]."""
    if teacher_feats.shape != student_feats.shape:
        raise InputError(
            f"feature shapes differ: {tuple(teacher_feats.shape)} vs {tuple(student_feats.shape)}"
        )
    t = F.normalize(teacher_feats.detach(), dim=-1, eps=NORM_EPS)
    s = F.normalize(student_feats, dim=-1, eps=NORM_EPS)
    return 1.0 - (t * s).sum(dim=-1)


def feature_distill(teacher_feats: torch.Tensor, student_feats: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample cosine distillation loss."""
    return feature_distill_per_sample(teacher_feats, student_feats).mean()


def cam_distill_per_sample(teacher_cam: torch.Tensor, student_cam: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between normalized attention maps, per sample.

    The mean (not sum) over spatial cells keeps the weight grid-size
    independent; maps are expected min-max normalized to [0, 1].
    """
    if teacher_cam.shape != student_cam.shape:
        raise InputError(
            f"attention map shapes differ: {tuple(teacher_cam.shape)} vs {tuple(student_cam.shape)}"
        )
    diff = (student_cam - teacher_cam.detach()).abs()
    return diff.flatten(1).mean(dim=1)


def cam_distill(teacher_cam: torch.Tensor, student_cam: torch.Tensor) -> torch.Tensor:
    """Batch mean of the per-sample attention distillation loss."""
    return cam_distill_per_sample(teacher_cam, student_cam).mean()


def lambda_schedule(lambda_prev: float, old_classes: int, new_classes: int) -> float:
    """Per-phase growth of the feature-distillation weight.

    lambda_t = lambda_{t-1} * sqrt((B + C) / C); the first incremental phase
    feeds the configured base value in as lambda_prev.
    """
    if new_classes <= 0:
        raise ConfigurationError("lambda schedule needs a positive new-class count")
    if old_classes < 0:
        raise ConfigurationError("old-class count must be nonnegative")
    return lambda_prev * math.sqrt((old_classes + new_classes) / new_classes)


@dataclass
class BatchParts:
    """Everything the total loss needs for one batch.

    teacher/student cams, when present, cover only the old-class rows of the
    batch (in batch order); feats cover the full batch. labels may be soft.
    """

    logits: torch.Tensor
    labels: torch.Tensor
    priors: PriorPair
    old_class_count: int
    student_feats: torch.Tensor | None = None
    teacher_feats: torch.Tensor | None = None
    student_cams: torch.Tensor | None = None
    teacher_cams: torch.Tensor | None = None


def total_loss(parts: BatchParts, weights: LossWeights,
               old_mask: torch.Tensor) -> tuple[torch.Tensor, dict[str, float]]:
    """Adjusted CE over all samples + lambda * distill over scope + gamma * CAM over old.

    Empty scopes contribute exactly 0. Returns the scalar total plus a float
    breakdown for logging/NaN diagnostics.
    """
    adj = adjusted_ce(parts.logits, parts.labels, parts.priors,
                      parts.old_class_count, weights.tau)
    total = adj
    detail = {"adjusted_ce": float(adj.detach())}

    dis_term = parts.logits.new_zeros(())
    if parts.teacher_feats is not None and weights.lambda_base > 0:
        scope = old_mask if weights.distill_scope == "exemplars_only" else torch.ones_like(old_mask)
        if scope.any():
            per = feature_distill_per_sample(parts.teacher_feats[scope], parts.student_feats[scope])
            dis_term = per.mean()
    detail["feature_distill"] = float(dis_term.detach())
    total = total + weights.lambda_base * dis_term

    cam_term = parts.logits.new_zeros(())
    if parts.teacher_cams is not None and weights.gamma > 0 and parts.teacher_cams.shape[0] > 0:
        n_old = int(old_mask.sum())
        if parts.teacher_cams.shape[0] != n_old:
            raise InputError(
                f"attention maps cover {parts.teacher_cams.shape[0]} samples but the batch has {n_old} old-class samples"
            )
        cam_term = cam_distill_per_sample(parts.teacher_cams, parts.student_cams).mean()
    detail["cam_distill"] = float(cam_term.detach())
    total = total + weights.gamma * cam_term

    detail["total"] = float(total.detach())
    return total, detail
