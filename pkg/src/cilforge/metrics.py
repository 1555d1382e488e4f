"""Per-phase evaluation and the incremental-learning metrics.

The accuracy history is a lower-triangular matrix: row t holds the phase-t
model's accuracy on the test data of each task j <= t, for both the softmax
head and the nearest-class-mean classifier. Average accuracy, last accuracy
and the forgetting rate are pure functions of the persisted log. Accuracies
are stored as exact (correct, total) fractions next to the float so nothing
drifts through serialization.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data import DatasetBundle, PhaseData, PhasePlan, to_float
from .exceptions import InputError, StateError
from .memory import ExemplarMemory, ncm_predict


@dataclass
class Fraction:
    correct: int
    total: int

    @property
    def value(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"correct": self.correct, "total": self.total, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "Fraction":
        return cls(int(d["correct"]), int(d["total"]))


@dataclass
class PhaseRow:
    """One evaluation row: the phase-t model over everything seen so far."""

    phase: int
    seen_classes: int
    acc_overall: Fraction
    acc_ncm_overall: Fraction
    acc_per_task: list[Fraction]
    acc_ncm_per_task: list[Fraction]
    lambda_used: float = 0.0
    wall_clock_s: float = 0.0
    forgetting_task0: float = 0.0  # filled in by MetricsLog.append
    timestamp: float = field(default_factory=time.time)

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "seen_classes": self.seen_classes,
            "acc_overall": self.acc_overall.to_dict(),
            "acc_ncm": self.acc_ncm_overall.to_dict(),
            "acc_per_task": [f.to_dict() for f in self.acc_per_task],
            "acc_ncm_per_task": [f.to_dict() for f in self.acc_ncm_per_task],
            "forgetting_task0": self.forgetting_task0,
            "lambda_used": self.lambda_used,
            "wall_clock_s": self.wall_clock_s,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseRow":
        return cls(
            phase=d["phase"],
            seen_classes=d["seen_classes"],
            acc_overall=Fraction.from_dict(d["acc_overall"]),
            acc_ncm_overall=Fraction.from_dict(d["acc_ncm"]),
            acc_per_task=[Fraction.from_dict(f) for f in d["acc_per_task"]],
            acc_ncm_per_task=[Fraction.from_dict(f) for f in d["acc_ncm_per_task"]],
            lambda_used=d.get("lambda_used", 0.0),
            wall_clock_s=d.get("wall_clock_s", 0.0),
            forgetting_task0=d.get("forgetting_task0", 0.0),
            timestamp=d.get("timestamp", 0.0),
        )


@dataclass
class MetricsLog:
    rows: list[PhaseRow] = field(default_factory=list)
    config_hash: str = ""

    def append(self, row: PhaseRow) -> None:
        if row.phase != len(self.rows):
            raise InputError(f"expected phase {len(self.rows)}, got {row.phase}")
        if self.rows:
            first = self.rows[0].acc_per_task[0]
            now = row.acc_per_task[0]
            row.forgetting_task0 = (first.correct * now.total
                                    - now.correct * first.total) * 100 \
                / (first.total * now.total)
        self.rows.append(row)

    @property
    def num_phases(self) -> int:
        return len(self.rows)

    def acc(self, t: int, j: int) -> float:
        """Accuracy of the phase-t model on task j's test data (j <= t)."""
        if j > t:
            raise InputError("accuracy matrix is lower-triangular")
        return self.rows[t].acc_per_task[j].value

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "phases": [r.to_dict() for r in self.rows],
            "summary": self.summary(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsLog":
        log = cls(config_hash=d.get("config_hash", ""))
        for r in d["phases"]:
            log.rows.append(PhaseRow.from_dict(r))
        return log

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsLog":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def summary(self) -> dict:
        f, f_defined = forgetting_rate(self), self.num_phases > 1
        return {
            "average_accuracy": average_incremental_accuracy(self),
            "last_accuracy": last_accuracy(self),
            "forgetting": f,
            "forgetting_defined": f_defined,
            "average_accuracy_ncm": sum(r.acc_ncm_overall.value for r in self.rows) / len(self.rows) if self.rows else 0.0,
            "last_accuracy_ncm": self.rows[-1].acc_ncm_overall.value if self.rows else 0.0,
        }


def average_incremental_accuracy(log: MetricsLog) -> float:
    """Mean of the per-phase overall accuracies, base phase included."""
    if not log.rows:
        raise StateError("metrics log is empty")
    return sum(r.acc_overall.value for r in log.rows) / len(log.rows)


def last_accuracy(log: MetricsLog) -> float:
    if not log.rows:
        raise StateError("metrics log is empty")
    return log.rows[-1].acc_overall.value


def forgetting_rate(log: MetricsLog) -> float:
    """Drop of task-0 test accuracy from the phase-0 model to the final model.

    Reported in percentage points; a single-phase log has no forgetting and
    reports 0 (flagged via summary()['forgetting_defined']). Computed from the
    exact stored fractions (cross-multiplied before dividing) so hand
    arithmetic reproduces bit-exactly.
    """
    if not log.rows:
        raise StateError("metrics log is empty")
    if log.num_phases == 1:
        return 0.0
    first = log.rows[0].acc_per_task[0]
    last = log.rows[-1].acc_per_task[0]
    return (first.correct * last.total - last.correct * first.total) * 100 \
        / (first.total * last.total)


def forgetting_points(acc_task0_at_0: float, acc_task0_at_n: float) -> float:
    """F = (acc at phase 0 - acc at phase N) on the identical task-0 test split."""
    return (acc_task0_at_0 - acc_task0_at_n) * 100.0


def confusion_matrix(preds: torch.Tensor, labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Counts matrix with rows = true class; row sums equal per-class counts."""
    if preds.shape != labels.shape:
        raise InputError("preds and labels must align")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes
                           or preds.min() < 0 or preds.max() >= num_classes):
        raise InputError(f"labels/preds out of range for {num_classes} classes")
    mat = torch.zeros(num_classes, num_classes, dtype=torch.long)
    for t, p in zip(labels.tolist(), preds.tolist()):
        mat[t, p] += 1
    return mat


def save_confusion_csv(mat: torch.Tensor, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + list(range(mat.shape[1])))
        for i, row in enumerate(mat.tolist()):
            writer.writerow([i] + row)


@torch.no_grad()
def predict_phase(model, head, memory: ExemplarMemory, images: torch.Tensor,
                  dataset: DatasetBundle, batch_size: int = 256):
    """Single forward pass per batch feeding both classifiers.

    Returns (softmax-argmax predictions, NCM predictions); features are
    computed once and shared, matching the evaluation contract.
    """
    model.eval()
    preds_soft, preds_ncm = [], []
    for start in range(0, images.shape[0], batch_size):
        x = to_float(images[start: start + batch_size], dataset.mean, dataset.std)
        feats, _ = model.extract_features(x)
        preds_soft.append(head(feats).argmax(dim=1))
        preds_ncm.append(ncm_predict(feats, memory.means))
    return torch.cat(preds_soft), torch.cat(preds_ncm)


def evaluate_phase(model, head, memory: ExemplarMemory, phase_data: PhaseData,
                   plan: PhasePlan, t: int, dataset: DatasetBundle,
                   lambda_used: float = 0.0, wall_clock_s: float = 0.0,
                   batch_size: int = 256) -> tuple[PhaseRow, torch.Tensor]:
    """Evaluate the phase-t model over all seen classes.

    Returns the metrics row plus the softmax confusion matrix. The NCM row
    uses the memory's refreshed class means (the memory update runs before
    evaluation in the experiment loop).
    """
    labels = phase_data.test_labels
    preds_soft, preds_ncm = predict_phase(
        model, head, memory, phase_data.test_images, dataset, batch_size
    )

    def frac(mask_pred, mask_sel=None) -> Fraction:
        if mask_sel is None:
            return Fraction(int((mask_pred == labels).sum()), labels.numel())
        sel = mask_sel
        return Fraction(int((mask_pred[sel] == labels[sel]).sum()), int(sel.sum()))

    per_task, per_task_ncm = [], []
    for j in range(t + 1):
        lo = plan.classes_up_to(j) - len(plan.phase_classes(j))
        hi = plan.classes_up_to(j)
        sel = (labels >= lo) & (labels < hi)
        per_task.append(frac(preds_soft, sel))
        per_task_ncm.append(frac(preds_ncm, sel))

    row = PhaseRow(
        phase=t,
        seen_classes=plan.classes_up_to(t),
        acc_overall=frac(preds_soft),
        acc_ncm_overall=frac(preds_ncm),
        acc_per_task=per_task,
        acc_ncm_per_task=per_task_ncm,
        lambda_used=lambda_used,
        wall_clock_s=wall_clock_s,
    )
    conf = confusion_matrix(preds_soft, labels, plan.classes_up_to(t))
    return row, conf
