"""Phase training: schedules, the base phase and the distilled incremental phase.

The base phase trains with plain cross-entropy (tau forced to 0) under a
per-step warmup ramp followed by cosine annealing to zero. Incremental phases
train against a frozen teacher snapshot with the adjusted cross-entropy over
the full batch, cosine feature distillation over the configured scope and
attention-map distillation over the old-class samples. Old head rows stay
frozen; the optimizer only ever sees the backbone, the active head rows and
the scale.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .backbone import FeatureExtractor
from .data import (DatasetBundle, PhaseData, augment_batch, iterate_batches,
                   mixup_batch, one_hot, to_float)
from .exceptions import ConfigurationError, NonFiniteLossError, StateError
from .gradcam import cam_from_forward
from .heads import CosineHead
from .losses import BatchParts, LossWeights, class_priors, total_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_per_phase: int = 250
    batch_size: int = 128
    base_lr: float = 2.5e-4
    head_lr: float = 2.5e-3
    warmup_epochs: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    mixup_incremental: bool = False
    mixup_alpha: float = 0.8
    seed: int = 0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0
    cam_detach_alpha: bool = False
    lambda_growth: str = "cumulative"  # or "base_constant"

    def __post_init__(self):
        if self.epochs_per_phase < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs_per_phase and batch_size must be positive")
        if self.base_lr <= 0 or self.head_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.warmup_epochs < 0:
            raise ConfigurationError("warmup_epochs must be nonnegative")
        if self.lambda_growth not in ("cumulative", "base_constant"):
            raise ConfigurationError(f"unknown lambda_growth {self.lambda_growth!r}")


def lr_multiplier(epoch: int, step_in_epoch: int, steps_per_epoch: int,
                  total_epochs: int, warmup_epochs: int) -> float:
    """Per-step schedule: linear ramp to exactly 1.0 at warmup end, then
    cosine annealing that reaches exactly 0 on the last step."""
    warm_steps = warmup_epochs * steps_per_epoch
    total_steps = total_epochs * steps_per_epoch
    gs = epoch * steps_per_epoch + step_in_epoch
    if gs < warm_steps:
        return (gs + 1) / warm_steps
    if total_steps == warm_steps:
        return 1.0
    progress = (gs + 1 - warm_steps) / (total_steps - warm_steps)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def lr_at(epoch: int, step_in_epoch: int, config: TrainConfig, steps_per_epoch: int,
          warmup_epochs: int | None = None) -> tuple[float, float]:
    """(backbone_lr, head_lr) at a step; warmup defaults to the config value."""
    if epoch >= config.epochs_per_phase:
        raise ConfigurationError(f"epoch {epoch} beyond {config.epochs_per_phase}")
    warm = config.warmup_epochs if warmup_epochs is None else warmup_epochs
    m = lr_multiplier(epoch, step_in_epoch, steps_per_epoch,
                      config.epochs_per_phase, warm)
    return config.base_lr * m, config.head_lr * m


def make_optimizer(model: FeatureExtractor, head: CosineHead, config: TrainConfig):
    """Decoupled-weight-decay adaptive-moment optimizer with separate head rate.

    Frozen head rows live in a buffer and never reach the optimizer, so weight
    decay cannot alter them. The scale parameter trains with the head group.
    """
    groups = [
        {"params": list(model.parameters()), "lr": config.base_lr},
        {"params": head.trainable_parameters(), "lr": config.head_lr},
    ]
    return torch.optim.AdamW(groups, betas=config.betas,
                             weight_decay=config.weight_decay)


def _set_lrs(optimizer, backbone_lr: float, head_lr: float) -> None:
    optimizer.param_groups[0]["lr"] = backbone_lr
    optimizer.param_groups[1]["lr"] = head_lr


def _check_finite(detail: dict, phase: int, epoch: int, step: int) -> None:
    for term, value in detail.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(term, phase, epoch, step)


def parameter_checksum(*modules: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers; detects any drift bit-exactly."""
    h = hashlib.sha256()
    for module in modules:
        for _, t in sorted(module.state_dict().items()):
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def phase_rng(seed: int, phase: int) -> np.random.Generator:
    """Phase-local RNG so resuming at a phase boundary replays identically."""
    return np.random.default_rng(np.random.SeedSequence([seed, phase]))


def train_base_phase(model: FeatureExtractor, head: CosineHead,
                     phase_data: PhaseData, config: TrainConfig,
                     dataset: DatasetBundle) -> None:
    """Supervised training of the base classes with mixup and warmup."""
    if phase_data.num_new == 0:
        raise ConfigurationError("base phase received no training data")
    if phase_data.num_replay:
        raise StateError("base phase cannot see replay exemplars")
    rng = phase_rng(config.seed, 0)
    optimizer = make_optimizer(model, head, config)
    images, labels = phase_data.new_images, phase_data.new_labels
    steps_per_epoch = math.ceil(images.shape[0] / config.batch_size)
    num_classes = head.num_classes
    model.train()
    for epoch in range(config.epochs_per_phase):
        for step, idx in enumerate(iterate_batches(images.shape[0], config.batch_size, rng)):
            x = augment_batch(images[idx], rng, dataset.allow_flip)
            x = to_float(x, dataset.mean, dataset.std)
            y = one_hot(labels[idx], num_classes)
            x, y = mixup_batch(x, y, config.mixup_alpha, rng)

            _set_lrs(optimizer, *lr_at(epoch, step, config, steps_per_epoch))
            optimizer.zero_grad(set_to_none=True)
            feats, _ = model.extract_features(x)
            logits = head(feats)
            loss, detail = total_loss(
                BatchParts(logits=logits, labels=y,
                           priors=class_priors(0, idx.numel()),
                           old_class_count=0),
                replace(config.weights, tau=0.0),
                old_mask=torch.zeros(idx.numel(), dtype=torch.bool),
            )
            _check_finite(detail, 0, epoch, step)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for g in optimizer.param_groups for p in g["params"]], config.grad_clip)
            optimizer.step()
        log.debug("phase 0 epoch %d loss %.4f", epoch, detail["total"])


def snapshot_teacher(model: FeatureExtractor, head: CosineHead) -> tuple[FeatureExtractor, CosineHead]:
    """Deep-copied frozen teacher in inference mode."""
    t_model = copy.deepcopy(model).eval()
    t_head = copy.deepcopy(head).eval()
    for p in list(t_model.parameters()) + list(t_head.parameters()):
        p.requires_grad_(False)
    return t_model, t_head


def extract_features_eval(model: FeatureExtractor, images: torch.Tensor,
                          dataset: DatasetBundle, batch_size: int = 256) -> torch.Tensor:
    """Pooled features of raw uint8 images, no augmentation, eval mode."""
    was_training = model.training
    model.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = to_float(images[start: start + batch_size], dataset.mean, dataset.std)
            feats.append(model.extract_features(x)[0])
    if was_training:
        model.train()
    return torch.cat(feats)


def imprint_for_phase(model: FeatureExtractor, head: CosineHead,
                      phase_data: PhaseData, dataset: DatasetBundle) -> None:
    """Expand the head for the phase's new classes via weight imprinting.

    Features come from the current (pre-phase) model; all earlier rows freeze.
    """
    per_class = {}
    for cls in sorted(set(phase_data.new_labels.tolist())):
        sel = phase_data.new_labels == cls
        per_class[cls] = extract_features_eval(model, phase_data.new_images[sel], dataset)
    head.imprint_new_classes(per_class)


def align_base_rows(model: FeatureExtractor, head: CosineHead,
                    phase_data: PhaseData, dataset: DatasetBundle) -> None:
    """Rewrite the just-trained base rows as feature prototypes (imprints).

    Incremental classes start from imprinted rows, so once frozen every row is
    a trained prototype; base rows trained from random init never get that
    treatment and, at short schedules, can stay near their tiny init while the
    backbone absorbs the task. Imprinting them from the base training data
    before the first freeze puts all rows in one cosine regime. Runs at the
    end of the base phase, while its data is still available.
    """
    from .heads import imprint_rows

    per_class = {}
    for cls in sorted(set(phase_data.new_labels.tolist())):
        sel = phase_data.new_labels == cls
        per_class[cls] = extract_features_eval(model, phase_data.new_images[sel], dataset)
    rows = imprint_rows(per_class)
    with torch.no_grad():
        head.active_weight.copy_(torch.stack([rows[c] for c in sorted(rows)]))


def train_incremental_phase(model: FeatureExtractor, head: CosineHead,
                            teacher_model: FeatureExtractor, teacher_head: CosineHead,
                            phase_data: PhaseData, config: TrainConfig,
                            dataset: DatasetBundle, lambda_t: float) -> None:
    """One incremental phase against a frozen teacher.

    Expects the head already expanded and imprinted. No warmup here: the
    ramp applies to the base phase only; incremental phases are pure cosine.
    """
    if teacher_model is None or teacher_head is None:
        raise StateError("incremental phase requires a teacher snapshot")
    if config.weights.tau > 0 and phase_data.num_replay == 0:
        raise ConfigurationError(
            "logit adjustment with tau > 0 requires a nonempty exemplar memory"
        )
    t = phase_data.phase_index
    rng = phase_rng(config.seed, t)
    optimizer = make_optimizer(model, head, config)
    weights = replace(config.weights, lambda_base=lambda_t)
    priors = class_priors(phase_data.num_replay, phase_data.num_new)
    images, labels = phase_data.train_images, phase_data.train_labels
    steps_per_epoch = math.ceil(images.shape[0] / config.batch_size)
    num_classes = head.num_classes
    old_count = phase_data.old_class_count
    frozen_before = head.frozen_weight.clone()
    teacher_sum_before = parameter_checksum(teacher_model, teacher_head)

    model.train()
    teacher_model.eval()
    for epoch in range(config.epochs_per_phase):
        for step, idx in enumerate(iterate_batches(images.shape[0], config.batch_size, rng)):
            x = augment_batch(images[idx], rng, dataset.allow_flip)
            x = to_float(x, dataset.mean, dataset.std)
            y_hard = labels[idx]
            if config.mixup_incremental:
                y = one_hot(y_hard, num_classes)
                x, y = mixup_batch(x, y, config.mixup_alpha, rng)
                # distillation scope and CAM targets follow the dominant label
                y_hard = y.argmax(dim=1)
            else:
                y = y_hard
            old_mask = y_hard < old_count

            _set_lrs(optimizer, *lr_at(epoch, step, config, steps_per_epoch,
                                       warmup_epochs=0))
            optimizer.zero_grad(set_to_none=True)
            feats, maps = model.extract_features(x)
            logits = head(feats)
            with torch.no_grad():
                t_feats, t_maps = teacher_model.extract_features(x)

            student_cams = teacher_cams = None
            if weights.gamma > 0 and bool(old_mask.any()):
                rows = torch.nonzero(old_mask, as_tuple=False).flatten()
                targets = y_hard[rows]
                student_cams = cam_from_forward(
                    maps, logits, targets, rows,
                    create_graph=True, detach_alpha=config.cam_detach_alpha,
                )
                # teacher CAM differentiates only pooling + head on a leaf
                # copy of the maps; the teacher backbone ran once above
                tm = t_maps[rows].requires_grad_(True)
                with torch.enable_grad():
                    t_logits = teacher_head(tm.mean(dim=(2, 3)))
                    teacher_cams = cam_from_forward(
                        tm, t_logits, targets, create_graph=False
                    ).detach()

            loss, detail = total_loss(
                BatchParts(logits=logits, labels=y, priors=priors,
                           old_class_count=old_count,
                           student_feats=feats, teacher_feats=t_feats,
                           student_cams=student_cams, teacher_cams=teacher_cams),
                weights, old_mask,
            )
            _check_finite(detail, t, epoch, step)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                [p for g in optimizer.param_groups for p in g["params"]], config.grad_clip)
            optimizer.step()
        log.debug("phase %d epoch %d loss %.4f", t, epoch, detail["total"])

    if not torch.equal(head.frozen_weight, frozen_before):
        raise StateError("frozen head rows changed during an incremental phase")
    if parameter_checksum(teacher_model, teacher_head) != teacher_sum_before:
        raise StateError("teacher parameters changed during an incremental phase")
