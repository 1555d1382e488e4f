"""Dataset ingestion, deterministic phase plans and batch assembly.

Every dataset is exposed as uint8 image tensors plus integer labels with
per-channel normalization stats. The class order is a seeded shuffle; phase t
relabels original classes to contiguous global ids (position in the order).
Augmentation (pad-4 random crop, optional flip) and mixup run on batches with
an explicit RNG so sample delivery is a pure function of (seed, phase, epoch).
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError, InputError
from .memory import ExemplarMemory

DATA_ENV_VAR = "CILFORGE_DATA"


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetBundle:
    """In-memory image classification dataset in a uniform layout."""

    name: str
    num_classes: int
    train_images: torch.Tensor   # (N, C, H, W) uint8
    train_labels: torch.Tensor   # (N,) int64
    test_images: torch.Tensor
    test_labels: torch.Tensor
    mean: tuple[float, ...]
    std: tuple[float, ...]
    allow_flip: bool = True

    @property
    def image_size(self) -> int:
        return self.train_images.shape[-1]

    @property
    def channels(self) -> int:
        return self.train_images.shape[1]

    def subsample(self, train_per_class: int | None, test_per_class: int | None,
                  seed: int = 0) -> "DatasetBundle":
        """Seeded per-class subsample; used by the desk presets."""
        def pick(images, labels, k):
            if k is None:
                return images, labels
            rng = np.random.default_rng(seed)
            keep = []
            for c in range(self.num_classes):
                idx = np.flatnonzero(labels.numpy() == c)
                rng.shuffle(idx)
                keep.append(idx[:k])
            keep = np.sort(np.concatenate(keep))
            return images[keep], labels[keep]

        tr_i, tr_l = pick(self.train_images, self.train_labels, train_per_class)
        te_i, te_l = pick(self.test_images, self.test_labels, test_per_class)
        return DatasetBundle(self.name, self.num_classes, tr_i, tr_l, te_i, te_l,
                             self.mean, self.std, self.allow_flip)


def data_root(explicit: str | None = None) -> Path:
    root = explicit or os.environ.get(DATA_ENV_VAR)
    if not root:
        raise ConfigurationError(
            f"no dataset root: set {DATA_ENV_VAR} or the data_root config key"
        )
    return Path(root)


def load_mnist(root: str | None = None) -> DatasetBundle:
    """MNIST, zero-padded from 28x28 to 32x32 so the backbone grid divides."""
    from torchvision.datasets import MNIST

    path = data_root(root)
    train = MNIST(path, train=True, download=False)
    test = MNIST(path, train=False, download=False)
    pad = lambda x: F.pad(x.unsqueeze(1), (2, 2, 2, 2))
    return DatasetBundle(
        name="mnist", num_classes=10,
        train_images=pad(train.data), train_labels=train.targets.long(),
        test_images=pad(test.data), test_labels=test.targets.long(),
        mean=(0.1307,), std=(0.3081,), allow_flip=False,
    )


def load_svhn(root: str | None = None) -> DatasetBundle:
    from torchvision.datasets import SVHN

    path = data_root(root)
    train = SVHN(path, split="train", download=False)
    test = SVHN(path, split="test", download=False)
    return DatasetBundle(
        name="svhn", num_classes=10,
        train_images=torch.from_numpy(train.data), train_labels=torch.from_numpy(train.labels).long(),
        test_images=torch.from_numpy(test.data), test_labels=torch.from_numpy(test.labels).long(),
        mean=(0.4377, 0.4438, 0.4728), std=(0.1980, 0.2010, 0.1970), allow_flip=False,
    )


def load_cifar100(root: str | None = None) -> DatasetBundle:
    from torchvision.datasets import CIFAR100

    path = data_root(root)
    train = CIFAR100(path, train=True, download=False)
    test = CIFAR100(path, train=False, download=False)
    to_nchw = lambda a: torch.from_numpy(a).permute(0, 3, 1, 2).contiguous()
    return DatasetBundle(
        name="cifar100", num_classes=100,
        train_images=to_nchw(train.data), train_labels=torch.tensor(train.targets).long(),
        test_images=to_nchw(test.data), test_labels=torch.tensor(test.targets).long(),
        mean=(0.5071, 0.4865, 0.4409), std=(0.2673, 0.2564, 0.2762), allow_flip=True,
    )


def load_image_folder(root: str | Path, name: str, image_size: int = 224,
                      mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225)) -> DatasetBundle:
    """ImageNet-style train/ val/ class-folder layout, decoded into memory.

    Intended for subsets; full ImageNet should be materialized elsewhere and
    is out of desk scope.
    """
    from PIL import Image

    root = Path(root)
    if not (root / "train").is_dir():
        raise ConfigurationError(f"expected {root}/train with class subfolders")
    classes = sorted(d.name for d in (root / "train").iterdir() if d.is_dir())
    if not classes:
        raise ConfigurationError(f"no class folders under {root}/train")
    class_to_id = {c: i for i, c in enumerate(classes)}

    def load_split(split):
        images, labels = [], []
        for cls in classes:
            for f in sorted((root / split / cls).glob("*")):
                img = Image.open(f).convert("RGB").resize((image_size, image_size))
                images.append(torch.from_numpy(np.array(img)).permute(2, 0, 1))
                labels.append(class_to_id[cls])
        if not images:
            raise ConfigurationError(f"no images under {root}/{split}")
        return torch.stack(images), torch.tensor(labels, dtype=torch.long)

    tr_i, tr_l = load_split("train")
    val_split = "val" if (root / "val").is_dir() else "test"
    te_i, te_l = load_split(val_split)
    return DatasetBundle(name, len(classes), tr_i, tr_l, te_i, te_l, mean, std, allow_flip=True)


# synthetic glyph classes: index -> renderer. Shapes share strokes (bars vs
# cross vs T, diagonals vs X, ring vs disc) so class boundaries stay nontrivial.

def _render_glyph(cls: int, rng: np.random.Generator, size: int) -> np.ndarray:
    img = np.zeros((size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cy = size / 2 + rng.uniform(-5, 5)
    cx = size / 2 + rng.uniform(-5, 5)
    length = size * rng.uniform(0.28, 0.42)
    thick = rng.uniform(1.2, 2.4)
    amp = rng.uniform(0.65, 1.0)

    def stroke(angle_deg):
        a = np.deg2rad(angle_deg + rng.uniform(-8, 8))
        dx, dy = np.cos(a), np.sin(a)
        # distance from each pixel to the segment through (cx, cy)
        px, py = xx - cx, yy - cy
        along = px * dx + py * dy
        perp = np.abs(-px * dy + py * dx)
        mask = (np.abs(along) <= length) & (perp <= thick)
        img[mask] = np.maximum(img[mask], amp)

    def ring(filled):
        r = size * rng.uniform(0.18, 0.3)
        d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        mask = d <= r if filled else np.abs(d - r) <= thick
        img[mask] = np.maximum(img[mask], amp)

    if cls == 0:
        stroke(0)                       # horizontal bar
    elif cls == 1:
        stroke(90)                      # vertical bar
    elif cls == 2:
        stroke(45)                      # diagonal
    elif cls == 3:
        stroke(135)                     # anti-diagonal
    elif cls == 4:
        stroke(0); stroke(90)           # plus
    elif cls == 5:
        ring(filled=False)
    elif cls == 6:
        ring(filled=True)
    elif cls == 7:
        stroke(45); stroke(135)         # X
    elif cls == 8:
        stroke(90)                      # L: vertical plus half horizontal
        cy2, cx2 = cy + length, cx + length / 2
        px, py = xx - cx2, yy - cy2
        mask = (np.abs(px) <= length / 2) & (np.abs(py) <= thick)
        img[mask] = np.maximum(img[mask], amp)
    else:
        stroke(90)                      # T: vertical plus top horizontal
        cy2 = cy - length
        px, py = xx - cx, yy - cy2
        mask = (np.abs(px) <= length * 0.8) & (np.abs(py) <= thick)
        img[mask] = np.maximum(img[mask], amp)

    img = img + rng.normal(0, 0.18, img.shape).astype(np.float32)
    return np.clip(img, 0, 1)


def make_synthetic(train_per_class: int = 200, test_per_class: int = 100,
                   image_size: int = 32, seed: int = 1234) -> DatasetBundle:
    """Procedural 10-class glyph dataset; fully deterministic from the seed."""
    rng = np.random.default_rng(seed)

    def split(per_class):
        images, labels = [], []
        for cls in range(10):
            for _ in range(per_class):
                images.append(_render_glyph(cls, rng, image_size))
                labels.append(cls)
        arr = (np.stack(images) * 255).astype(np.uint8)
        return (torch.from_numpy(arr).unsqueeze(1),
                torch.tensor(labels, dtype=torch.long))

    tr_i, tr_l = split(train_per_class)
    te_i, te_l = split(test_per_class)
    return DatasetBundle("synthetic", 10, tr_i, tr_l, te_i, te_l,
                         mean=(0.2,), std=(0.25,), allow_flip=False)


def load_dataset(name: str, root: str | None = None,
                 train_per_class: int | None = None,
                 test_per_class: int | None = None,
                 subsample_seed: int = 0) -> DatasetBundle:
    loaders = {
        "mnist": load_mnist,
        "svhn": load_svhn,
        "cifar100": load_cifar100,
    }
    if name == "synthetic":
        bundle = make_synthetic(train_per_class or 200, test_per_class or 100)
        return bundle
    if name in ("imagenet100", "imagenet1k"):
        bundle = load_image_folder(data_root(root) / name, name)
    elif name in loaders:
        bundle = loaders[name](root)
    else:
        raise ConfigurationError(f"unknown dataset {name!r}")
    if train_per_class or test_per_class:
        bundle = bundle.subsample(train_per_class, test_per_class, seed=subsample_seed)
    return bundle


# ---------------------------------------------------------------------------
# phase plan


@dataclass(frozen=True)
class PhasePlan:
    """Deterministic split of the class set into a base phase + N increments."""

    class_order: tuple[int, ...]
    base_count: int
    increment: int
    num_increments: int
    seed: int

    @property
    def num_phases(self) -> int:
        return self.num_increments + 1

    @property
    def total_classes(self) -> int:
        return len(self.class_order)

    def classes_up_to(self, t: int) -> int:
        """Number of classes seen through phase t (global ids 0..count-1)."""
        self._check_phase(t)
        return self.base_count + t * self.increment

    def phase_classes(self, t: int) -> tuple[int, ...]:
        """Original class ids introduced at phase t."""
        self._check_phase(t)
        if t == 0:
            return self.class_order[: self.base_count]
        start = self.base_count + (t - 1) * self.increment
        return self.class_order[start: start + self.increment]

    def global_label(self, original_class: int) -> int:
        return self.class_order.index(original_class)

    def task_of_global(self, g: int) -> int:
        """Phase index that introduced global label g."""
        if g < self.base_count:
            return 0
        return 1 + (g - self.base_count) // self.increment

    def _check_phase(self, t: int) -> None:
        if not 0 <= t <= self.num_increments:
            raise InputError(f"phase {t} out of range 0..{self.num_increments}")

    def to_dict(self) -> dict:
        return {
            "class_order": list(self.class_order),
            "base_count": self.base_count,
            "increment": self.increment,
            "num_increments": self.num_increments,
            "seed": self.seed,
        }


def make_plan(num_classes: int, base: int | float, increment: int, seed: int) -> PhasePlan:
    """Seeded class order plus base/increment arithmetic.

    `base` may be an absolute count or a fraction of num_classes (e.g. 0.5
    for the half-base protocol). The remainder must split evenly into
    increments.
    """
    if isinstance(base, float):
        if not 0 < base < 1:
            raise ConfigurationError(f"base fraction must be in (0,1), got {base}")
        base = int(round(num_classes * base))
    if not 0 < base <= num_classes:
        raise ConfigurationError(f"base count {base} out of range for {num_classes} classes")
    rest = num_classes - base
    if increment <= 0 and rest > 0:
        raise ConfigurationError("increment must be positive when classes remain")
    if rest > 0 and rest % increment != 0:
        raise ConfigurationError(
            f"{rest} remaining classes do not split into increments of {increment}"
        )
    order = list(range(num_classes))
    random.Random(seed).shuffle(order)
    return PhasePlan(
        class_order=tuple(order),
        base_count=base,
        increment=increment if rest > 0 else max(increment, 1),
        num_increments=rest // increment if rest > 0 else 0,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# phase assembly


@dataclass
class PhaseData:
    """Training and evaluation material of one phase, relabeled to global ids."""

    phase_index: int
    new_images: torch.Tensor      # uint8
    new_labels: torch.Tensor      # global ids of the phase's classes
    new_dataset_indices: torch.Tensor
    replay_images: torch.Tensor   # uint8 exemplars from memory
    replay_labels: torch.Tensor
    test_images: torch.Tensor     # all seen classes
    test_labels: torch.Tensor
    old_class_count: int          # global ids below this are old

    @property
    def train_images(self) -> torch.Tensor:
        if self.replay_images.numel() == 0:
            return self.new_images
        return torch.cat([self.new_images, self.replay_images])

    @property
    def train_labels(self) -> torch.Tensor:
        return torch.cat([self.new_labels, self.replay_labels])

    @property
    def old_mask(self) -> torch.Tensor:
        return self.train_labels < self.old_class_count

    @property
    def num_new(self) -> int:
        return self.new_images.shape[0]

    @property
    def num_replay(self) -> int:
        return self.replay_labels.shape[0]


def global_label_map(plan: PhasePlan) -> torch.Tensor:
    """Lookup tensor: original class id -> global (order-position) id."""
    mapping = torch.empty(plan.total_classes, dtype=torch.long)
    mapping[torch.tensor(plan.class_order)] = torch.arange(plan.total_classes)
    return mapping


def assemble_phase(plan: PhasePlan, t: int, memory: ExemplarMemory,
                   dataset: DatasetBundle) -> PhaseData:
    """Gather phase-t new-class data, the full replay set and seen-class tests."""
    plan._check_phase(t)
    mapping = global_label_map(plan)
    new_classes = plan.phase_classes(t)
    tr_idx = torch.cat([
        torch.nonzero(dataset.train_labels == c, as_tuple=False).flatten()
        for c in new_classes
    ])
    seen = plan.classes_up_to(t)
    seen_original = plan.class_order[:seen]
    te_mask = torch.isin(dataset.test_labels, torch.tensor(seen_original))
    te_idx = torch.nonzero(te_mask, as_tuple=False).flatten()
    replay_images, replay_labels = memory.replay_data()
    if t == 0 and replay_labels.numel() > 0:
        raise InputError("phase 0 cannot carry replay exemplars")
    return PhaseData(
        phase_index=t,
        new_images=dataset.train_images[tr_idx],
        new_labels=mapping[dataset.train_labels[tr_idx]],
        new_dataset_indices=tr_idx,
        replay_images=replay_images if replay_labels.numel() else
            torch.zeros((0,) + dataset.train_images.shape[1:], dtype=torch.uint8),
        replay_labels=replay_labels,
        test_images=dataset.test_images[te_idx],
        test_labels=mapping[dataset.test_labels[te_idx]],
        old_class_count=seen - len(new_classes),
    )


# ---------------------------------------------------------------------------
# batch transforms


def to_float(images: torch.Tensor, mean, std) -> torch.Tensor:
    """uint8 (B,C,H,W) -> normalized float32."""
    x = images.float() / 255.0
    m = torch.tensor(mean).view(1, -1, 1, 1)
    s = torch.tensor(std).view(1, -1, 1, 1)
    return (x - m) / s


def augment_batch(images: torch.Tensor, rng: np.random.Generator,
                  allow_flip: bool, pad: int = 4) -> torch.Tensor:
    """Pad-and-crop jitter plus optional horizontal flip, per sample."""
    B, C, H, W = images.shape
    padded = F.pad(images, (pad, pad, pad, pad))
    out = torch.empty_like(images)
    offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
    flips = rng.random(B) < 0.5 if allow_flip else np.zeros(B, dtype=bool)
    for i in range(B):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        crop = padded[i, :, dy: dy + H, dx: dx + W]
        out[i] = torch.flip(crop, dims=[2]) if flips[i] else crop
    return out


def mixup_batch(images: torch.Tensor, soft_labels: torch.Tensor, alpha: float,
                rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Convex combination with a shared Beta(alpha, alpha) coefficient.

    Labels must already be distributions (one-hot for plain batches); they
    are mixed with the same coefficient and stay valid distributions.
    Batch size 1 passes through unchanged.
    """
    if alpha <= 0:
        raise ConfigurationError("mixup alpha must be positive")
    if images.shape[0] < 2:
        return images, soft_labels
    lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(images.shape[0]))
    mixed_x = lam * images + (1 - lam) * images[perm]
    mixed_y = lam * soft_labels + (1 - lam) * soft_labels[perm]
    return mixed_x, mixed_y


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    return F.one_hot(labels, num_classes).float()


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator,
                    shuffle: bool = True):
    """Yield index tensors covering 0..n-1; order is a pure function of rng state."""
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start: start + batch_size].copy())
