"""Herding-selected exemplar memory, budget policies and the NCM classifier.

Selection is the greedy mean-matching rule: repeatedly add the candidate
whose inclusion brings the running mean of the selected set closest to the
class mean. The selection order is preserved so budget shrinks keep the
highest-priority prefix. Class means are refreshed from the current model
over the stored exemplars only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, InputError, StateError

NORM_EPS = 1e-8


@dataclass(frozen=True)
class BudgetPolicy:
    """per_class keeps M exemplars per class; fixed_total splits a cap evenly."""

    kind: str      # "per_class" | "fixed_total"
    amount: int

    def __post_init__(self):
        if self.kind not in ("per_class", "fixed_total"):
            raise ConfigurationError(f"unknown budget policy {self.kind!r}")
        if self.amount < 1:
            raise ConfigurationError("budget amount must be >= 1")

    @classmethod
    def per_class(cls, m: int) -> "BudgetPolicy":
        return cls("per_class", m)

    @classmethod
    def fixed_total(cls, cap: int) -> "BudgetPolicy":
        return cls("fixed_total", cap)


def herding_select(features: torch.Tensor, m: int) -> list[int]:
    """Greedy herding order over one class's feature matrix (n x d).

    Iteratively picks the unselected index minimizing
    || mean(features) - (sum_selected + f_i) / (k + 1) ||, ties broken by
    lowest index. Returns min(n, m) indices in selection order. m = 0 gives
    an empty list.
    """
    if features.ndim != 2 or features.shape[0] < 1:
        raise InputError("herding needs an (n, d) feature matrix with n >= 1")
    if not torch.isfinite(features).all():
        raise InputError("herding features must be finite")
    if m <= 0:
        return []
    feats = features.to(torch.float64)
    n = feats.shape[0]
    mu = feats.mean(dim=0)
    selected: list[int] = []
    running = torch.zeros_like(mu)
    remaining = torch.ones(n, dtype=torch.bool)
    for k in range(min(n, m)):
        cand = (running + feats) / (k + 1)     # (n, d) candidate means
        dist = (cand - mu).norm(dim=1)
        dist[~remaining] = float("inf")
        # lowest index within a tolerance of the minimum: symmetric
        # configurations produce exact mathematical ties that float rounding
        # would otherwise break arbitrarily
        dmin = float(dist.min())
        tol = 1e-12 * max(1.0, dmin)
        idx = int(torch.nonzero(dist <= dmin + tol)[0])
        selected.append(idx)
        remaining[idx] = False
        running = running + feats[idx]
    return selected


def ncm_predict(features: torch.Tensor, means: dict[int, torch.Tensor]) -> torch.Tensor:
    """Nearest-class-mean labels: argmin distance between unit vectors.

    Equivalent to argmax cosine similarity; ties resolve to the lowest class
    index.
    """
    if not means:
        raise StateError("NCM prediction requires at least one class mean")
    classes = sorted(means)
    mean_mat = torch.stack([F.normalize(means[c].to(torch.float64), dim=0, eps=NORM_EPS)
                            for c in classes])
    f = F.normalize(features.to(torch.float64), dim=-1, eps=NORM_EPS)
    dists = torch.cdist(f, mean_mat)
    best = dists.argmin(dim=1)
    class_ids = torch.tensor(classes, dtype=torch.long)
    return class_ids[best]


@dataclass
class StoredClass:
    """One class's exemplars: raw images plus their dataset indices, in herding order."""

    indices: list[int]
    images: torch.Tensor   # (k, C, H, W) uint8, untouched by augmentation


class ExemplarMemory:
    """Replay store keyed by global class id."""

    def __init__(self, budget: BudgetPolicy):
        self.budget = budget
        self.store: dict[int, StoredClass] = {}
        self.means: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return sum(sc.images.shape[0] for sc in self.store.values())

    @property
    def classes(self) -> list[int]:
        return sorted(self.store)

    def quota(self, num_seen_classes: int) -> int:
        if self.budget.kind == "per_class":
            return self.budget.amount
        quota = self.budget.amount // num_seen_classes
        if quota == 0:
            raise ConfigurationError(
                f"budget {self.budget.amount} too small for {num_seen_classes} classes (quota 0)"
            )
        return quota

    def update(self, new_classes: dict[int, tuple[torch.Tensor, list[int], torch.Tensor]],
               feature_fn) -> None:
        """Insert the phase's new classes and re-balance the budget.

        new_classes maps class id -> (features n x d, dataset indices, raw
        images). Herding runs on L2-normalized features. Under fixed_total the
        per-class quota is recomputed over all seen classes and existing lists
        are truncated to their herding prefix. Class means are recomputed with
        `feature_fn` (images -> features) over the stored exemplars.
        """
        for cls, (feats, indices, images) in sorted(new_classes.items()):
            if cls in self.store:
                raise InputError(f"class {cls} already stored")
            if feats.shape[0] != len(indices) or feats.shape[0] != images.shape[0]:
                raise InputError("features, indices and images must align")
            order = herding_select(F.normalize(feats, dim=-1, eps=NORM_EPS), feats.shape[0])
            self.store[cls] = StoredClass(
                indices=[indices[i] for i in order],
                images=images[torch.tensor(order)].clone(),
            )
        quota = self.quota(len(self.store))
        for cls, sc in self.store.items():
            if sc.images.shape[0] > quota:
                sc.indices = sc.indices[:quota]
                sc.images = sc.images[:quota].clone()
        self.refresh_means(feature_fn)

    def refresh_means(self, feature_fn) -> None:
        """Recompute unit class means from stored exemplars with the current model."""
        self.means = {}
        for cls, sc in self.store.items():
            feats = feature_fn(sc.images)
            mean = F.normalize(feats, dim=-1, eps=NORM_EPS).mean(dim=0)
            self.means[cls] = F.normalize(mean, dim=0, eps=NORM_EPS)

    def replay_data(self) -> tuple[torch.Tensor, torch.Tensor]:
        """All stored exemplars as (images uint8, labels)."""
        if not self.store:
            return torch.zeros(0, 0, 0, 0, dtype=torch.uint8), torch.zeros(0, dtype=torch.long)
        images = torch.cat([sc.images for _, sc in sorted(self.store.items())])
        labels = torch.cat([
            torch.full((sc.images.shape[0],), cls, dtype=torch.long)
            for cls, sc in sorted(self.store.items())
        ])
        return images, labels

    def check_budget(self) -> None:
        """Assert the budget invariant; raises StateError on violation."""
        if not self.store:
            return
        if self.budget.kind == "per_class":
            for cls, sc in self.store.items():
                if sc.images.shape[0] > self.budget.amount:
                    raise StateError(f"class {cls} exceeds per-class budget")
        else:
            if len(self) > self.budget.amount:
                raise StateError(f"memory size {len(self)} exceeds cap {self.budget.amount}")
            quota = self.quota(len(self.store))
            for cls, sc in self.store.items():
                if sc.images.shape[0] > quota:
                    raise StateError(f"class {cls} exceeds fixed-total quota {quota}")

    def manifest(self) -> dict:
        """JSON-serializable view: per class, sample indices in herding order."""
        return {
            "budget": {"kind": self.budget.kind, "amount": self.budget.amount},
            "classes": {str(c): sc.indices for c, sc in sorted(self.store.items())},
        }

    def save_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2))

    def state(self) -> dict:
        return {
            "budget_kind": self.budget.kind,
            "budget_amount": self.budget.amount,
            "store": {c: (sc.indices, sc.images) for c, sc in self.store.items()},
            "means": dict(self.means),
        }

    @classmethod
    def from_state(cls, state: dict) -> "ExemplarMemory":
        mem = cls(BudgetPolicy(state["budget_kind"], state["budget_amount"]))
        for c, (indices, images) in state["store"].items():
            mem.store[int(c)] = StoredClass(indices=list(indices), images=images.clone())
        mem.means = {int(c): v.clone() for c, v in state["means"].items()}
        return mem
