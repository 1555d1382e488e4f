"""Expandable cosine-normalized classifier.

Logits are a learnable positive scale times the cosine between L2-normalized
features and L2-normalized per-class weight rows. New classes are appended
with weight imprinting; rows of earlier classes move into a frozen buffer so
neither gradients nor weight decay can alter them.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, InputError

NORM_EPS = 1e-8


def cosine_logits(features: torch.Tensor, weights: torch.Tensor, eta: torch.Tensor | float) -> torch.Tensor:
    """Scaled cosine similarity logits: eta * <f_norm, w_norm>.

    Zero-norm rows are epsilon-stabilized (norm clamped at 1e-8), never a crash.
    Every entry lies in [-eta, eta].
    """
    if features.shape[-1] != weights.shape[-1]:
        raise InputError(
            f"feature dim {features.shape[-1]} does not match head width {weights.shape[-1]}"
        )
    f = F.normalize(features, dim=-1, eps=NORM_EPS)
    w = F.normalize(weights, dim=-1, eps=NORM_EPS)
    return eta * (f @ w.t())


def imprint_rows(per_class_features: dict[int, torch.Tensor]) -> dict[int, torch.Tensor]:
    """Weight imprinting: unit-normalized mean of unit-normalized features."""
    rows = {}
    for cls, feats in per_class_features.items():
        if feats.numel() == 0:
            raise InputError(f"cannot imprint class {cls}: empty feature set")
        mean = F.normalize(feats, dim=-1, eps=NORM_EPS).mean(dim=0)
        rows[cls] = F.normalize(mean, dim=0, eps=NORM_EPS)
    return rows


class CosineHead(nn.Module):
    """Cosine classifier with per-class freezing and a softplus-positive scale.

    Rows are split between a frozen buffer (old classes, excluded from the
    optimizer) and an active parameter (classes still training). Rows are
    appended, never reordered, so class index == row index.
    """

    def __init__(self, feature_dim: int, num_classes: int, eta_init: float = 10.0):
        super().__init__()
        if num_classes < 1:
            raise ConfigurationError("head needs at least one class")
        self.feature_dim = feature_dim
        self.register_buffer("frozen_weight", torch.zeros(0, feature_dim))
        self.active_weight = nn.Parameter(torch.empty(num_classes, feature_dim))
        nn.init.trunc_normal_(self.active_weight, std=0.02)
        # softplus(eta_raw) == eta_init at start; keeps eta positive while learnable
        self.eta_raw = nn.Parameter(torch.tensor(_softplus_inverse(eta_init)))

    @property
    def eta(self) -> torch.Tensor:
        return F.softplus(self.eta_raw)

    @property
    def num_classes(self) -> int:
        return self.frozen_weight.shape[0] + self.active_weight.shape[0]

    @property
    def num_frozen(self) -> int:
        return self.frozen_weight.shape[0]

    @property
    def weight(self) -> torch.Tensor:
        """All class rows, frozen first; row index equals class index."""
        return torch.cat([self.frozen_weight, self.active_weight], dim=0)

    @property
    def frozen_mask(self) -> torch.Tensor:
        mask = torch.zeros(self.num_classes, dtype=torch.bool)
        mask[: self.num_frozen] = True
        return mask

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return cosine_logits(features, self.weight, self.eta)

    def imprint_new_classes(self, per_class_features: dict[int, torch.Tensor]) -> None:
        """Freeze all existing rows, then append one imprinted row per new class.

        Expected class ids are exactly num_classes..num_classes+C-1, with
        features extracted by the current (pre-phase) model.
        """
        start = self.num_classes
        expected = list(range(start, start + len(per_class_features)))
        if sorted(per_class_features) != expected:
            raise InputError(
                f"new class ids must be contiguous {expected}, got {sorted(per_class_features)}"
            )
        rows = imprint_rows(per_class_features)
        self.freeze_all()
        stacked = torch.stack([rows[c] for c in expected]).to(self.frozen_weight)
        self.active_weight = nn.Parameter(stacked)

    def freeze_all(self) -> None:
        """Move every active row into the frozen buffer."""
        merged = torch.cat([self.frozen_weight, self.active_weight.detach()], dim=0)
        self.frozen_weight = merged
        self.active_weight = nn.Parameter(torch.zeros(0, self.feature_dim))

    def trainable_parameters(self):
        """Parameters the optimizer may update (active rows + scale)."""
        params = [self.eta_raw]
        if self.active_weight.shape[0] > 0:
            params.append(self.active_weight)
        return params

    def state(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "frozen_weight": self.frozen_weight.clone(),
            "active_weight": self.active_weight.detach().clone(),
            "eta_raw": self.eta_raw.detach().clone(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "CosineHead":
        head = cls(state["feature_dim"], max(1, state["active_weight"].shape[0]))
        head.frozen_weight = state["frozen_weight"].clone()
        head.active_weight = nn.Parameter(state["active_weight"].clone())
        head.eta_raw = nn.Parameter(state["eta_raw"].clone())
        return head


def _softplus_inverse(y: float) -> float:
    if y <= 0:
        raise ConfigurationError("eta must be positive")
    return y + math.log(-math.expm1(-y))
