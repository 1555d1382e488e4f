"""Gradient-weighted class activation maps over the final-hierarchy features.

Channel weights are the spatial mean of d(logit_target)/d(maps); the raw map
is ReLU of the weighted channel sum, then min-max normalized per sample so
maps from different models are comparable. Teacher maps are computed on a
detached leaf copy of the feature maps (the logit depends on the maps only
through pooling + head), which leaves the teacher untouched and builds no
backbone graph. Student maps keep the graph so the attention loss reaches
the backbone parameters (second order unless alpha is detached).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from .backbone import FeatureExtractor
from .exceptions import InputError
from .heads import CosineHead

NORM_EPS = 1e-8


@dataclass
class CamMap:
    """Normalized spatial heatmaps with their target classes."""

    values: torch.Tensor        # (B, g, g) in [0, 1]
    target_class: torch.Tensor  # (B,)
    source: str                 # "teacher" | "student"


def normalize_cam(raw: torch.Tensor) -> torch.Tensor:
    """Per-sample (x - min) / (max - min + eps); an all-zero map stays all-zero.

    A constant map normalizes to zero everywhere (degenerate range).
    """
    flat = raw.flatten(1)
    lo = flat.min(dim=1).values.view(-1, 1, 1)
    hi = flat.max(dim=1).values.view(-1, 1, 1)
    return (raw - lo) / (hi - lo + NORM_EPS)


def cam_from_forward(maps: torch.Tensor, logits: torch.Tensor, targets: torch.Tensor,
                     rows: torch.Tensor | None = None, *, create_graph: bool = False,
                     detach_alpha: bool = False) -> torch.Tensor:
    """Normalized CAMs from an existing forward pass.

    maps are the final-hierarchy features the logits were computed from;
    `rows` restricts the output to a subset of batch rows (targets are
    indexed the same way). create_graph=True keeps the result differentiable
    w.r.t. whatever produced the maps.
    """
    if rows is None:
        rows = torch.arange(maps.shape[0], device=maps.device)
    selected = logits[rows, targets].sum()
    grads, = torch.autograd.grad(selected, maps, create_graph=create_graph)
    alpha = grads[rows].mean(dim=(2, 3), keepdim=True)      # (R, C, 1, 1)
    if detach_alpha:
        alpha = alpha.detach()
    raw = torch.relu((alpha * maps[rows]).sum(dim=1))       # (R, g, g)
    return normalize_cam(raw)


def grad_cam(extractor: FeatureExtractor, head: CosineHead, images: torch.Tensor,
             target_classes: torch.Tensor, *, build_graph: bool = False,
             detach_alpha: bool = False, source: str = "student") -> CamMap:
    """Grad-CAM heatmaps of the target-class logits for a batch of images.

    build_graph=True keeps the maps attached to the model graph so a loss on
    the CAM backpropagates into the extractor (student mode); build_graph=False
    runs the backbone without autograd and differentiates only the pooling +
    head path on a leaf copy (teacher mode). Model parameters are never
    modified; no .grad fields are touched.
    """
    if target_classes.min() < 0 or target_classes.max() >= head.num_classes:
        raise InputError(
            f"target class out of range for a {head.num_classes}-class head"
        )
    if build_graph:
        pooled, maps = extractor.extract_features(images)
        logits = head(pooled)
        values = cam_from_forward(maps, logits, target_classes,
                                  create_graph=True, detach_alpha=detach_alpha)
    else:
        with torch.no_grad():
            maps = extractor.forward_maps(images)
        maps = maps.requires_grad_(True)
        with torch.enable_grad():
            logits = head(maps.mean(dim=(2, 3)))
            values = cam_from_forward(maps, logits, target_classes,
                                      create_graph=False, detach_alpha=detach_alpha)
        values = values.detach()
    return CamMap(values=values, target_class=target_classes, source=source)


def save_cam_overlays(cams: CamMap, images: torch.Tensor, out_dir: str | Path,
                      phase: int, indices=None, alpha: float = 0.45) -> list[Path]:
    """Write per-image PNG overlays: CAM upsampled to image size, alpha-blended.

    Files are named cam_phase{t}_class{c}_{idx}.png. Plotting imports stay
    local so training never needs them.
    """
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import cm
    from PIL import Image
    import torch.nn.functional as F

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if indices is None:
        indices = range(images.shape[0])

    heat = F.interpolate(cams.values.unsqueeze(1), size=images.shape[-2:],
                         mode="bilinear", align_corners=False).squeeze(1)
    paths = []
    for row, idx in enumerate(indices):
        img = images[row].detach().cpu()
        img = (img - img.min()) / (img.max() - img.min() + NORM_EPS)
        if img.shape[0] == 1:
            img = img.repeat(3, 1, 1)
        base = img.permute(1, 2, 0).numpy()
        colored = cm.jet(heat[row].detach().cpu().numpy())[..., :3]
        blend = (1 - alpha) * base + alpha * colored
        arr = (blend * 255).clip(0, 255).astype("uint8")
        cls = int(cams.target_class[row])
        path = out_dir / f"cam_phase{phase}_class{cls}_{idx}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
