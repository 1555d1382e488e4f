"""Experiment configuration: file format, presets, validation, overrides.

Configs are a small TOML-style format (sections, key = value; strings, ints,
floats, bools, flat lists). Unknown keys are rejected with field-level
messages. A fully resolved copy is written into every run directory and its
canonical JSON is hashed so runs are self-describing and comparable.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .exceptions import ConfigurationError
from .losses import LossWeights
from .memory import BudgetPolicy
from .training import TrainConfig


# ---------------------------------------------------------------------------
# minimal TOML-subset reader/writer (sections, scalars, flat lists)

_SECTION_RE = re.compile(r"^\[([A-Za-z0-9_.-]+)\]$")
_KEY_RE = re.compile(r"^([A-Za-z0-9_-]+)\s*=\s*(.+)$")


def _parse_scalar(text: str) -> Any:
    text = text.strip()
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part) for part in inner.split(",")]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    raise ConfigurationError(f"cannot parse config value {text!r} (strings need quotes)")


def parse_config_text(text: str) -> dict:
    """Parse the config format into {section: {key: value}} with '' for top level."""
    tree: dict[str, dict] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1)
            tree.setdefault(section, {})
            continue
        m = _KEY_RE.match(line)
        if not m:
            raise ConfigurationError(f"config line {lineno}: cannot parse {raw!r}")
        tree.setdefault(section, {})[m.group(1)] = _parse_scalar(m.group(2))
    return tree


def _format_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_scalar(v) for v in value) + "]"
    return repr(value)


def format_config_tree(tree: dict) -> str:
    lines = []
    for key, value in tree.get("", {}).items():
        lines.append(f"{key} = {_format_scalar(value)}")
    for section in sorted(k for k in tree if k):
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in tree[section].items():
            lines.append(f"{key} = {_format_scalar(value)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: str = "synthetic"
    data_root: str | None = None
    base_classes: int | None = None
    base_fraction: float | None = 0.5
    increment: int = 2
    seed: int = 0
    output_dir: str = "runs"
    repeats: int = 1
    deterministic: bool = True
    train_per_class: int | None = None
    test_per_class: int | None = None
    budget: BudgetPolicy = field(default_factory=lambda: BudgetPolicy.per_class(20))
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.base_classes is None and self.base_fraction is None:
            raise ConfigurationError("one of base_classes / base_fraction is required")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")

    @property
    def base(self) -> int | float:
        return self.base_classes if self.base_classes is not None else self.base_fraction

    def to_tree(self) -> dict:
        w = self.train.weights
        return {
            "": {
                "name": self.name,
                "dataset": self.dataset,
                **({"data_root": self.data_root} if self.data_root else {}),
                **({"base_classes": self.base_classes} if self.base_classes is not None
                   else {"base_fraction": self.base_fraction}),
                "increment": self.increment,
                "seed": self.seed,
                "output_dir": self.output_dir,
                "repeats": self.repeats,
                "deterministic": self.deterministic,
                **({"train_per_class": self.train_per_class} if self.train_per_class else {}),
                **({"test_per_class": self.test_per_class} if self.test_per_class else {}),
            },
            "budget": {"policy": self.budget.kind, "amount": self.budget.amount},
            "backbone": self.backbone.to_dict(),
            "train": {
                "epochs_per_phase": self.train.epochs_per_phase,
                "batch_size": self.train.batch_size,
                "base_lr": self.train.base_lr,
                "head_lr": self.train.head_lr,
                "warmup_epochs": self.train.warmup_epochs,
                "mixup_incremental": self.train.mixup_incremental,
                "mixup_alpha": self.train.mixup_alpha,
                "weight_decay": self.train.weight_decay,
                "betas": list(self.train.betas),
                "grad_clip": self.train.grad_clip,
                "cam_detach_alpha": self.train.cam_detach_alpha,
                "lambda_growth": self.train.lambda_growth,
                "tau": w.tau,
                "lambda_base": w.lambda_base,
                "gamma": w.gamma,
                "distill_scope": w.distill_scope,
            },
        }

    def config_hash(self) -> str:
        tree = self.to_tree()
        tree[""].pop("output_dir", None)
        return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text(format_config_tree(self.to_tree()))


_TOP_KEYS = {"name", "dataset", "data_root", "base_classes", "base_fraction",
             "increment", "seed", "output_dir", "repeats", "deterministic",
             "train_per_class", "test_per_class"}
_BUDGET_KEYS = {"policy", "amount"}
_BACKBONE_KEYS = {"patch_size", "num_hierarchies", "embed_dims", "heads",
                  "blocks_per_level", "image_size", "channels", "mlp_ratio"}
_TRAIN_KEYS = {"epochs_per_phase", "batch_size", "base_lr", "head_lr",
               "warmup_epochs", "mixup_incremental", "mixup_alpha", "seed",
               "weight_decay", "betas", "grad_clip", "cam_detach_alpha",
               "lambda_growth", "tau", "lambda_base", "gamma", "distill_scope"}


def config_from_tree(tree: dict) -> ExperimentConfig:
    """Validate a parsed tree and build the config; unknown keys are fatal."""
    known_sections = {"", "budget", "backbone", "train"}
    for section in tree:
        if section not in known_sections:
            raise ConfigurationError(f"unknown config section [{section}]")
    for section, allowed in (("", _TOP_KEYS), ("budget", _BUDGET_KEYS),
                             ("backbone", _BACKBONE_KEYS), ("train", _TRAIN_KEYS)):
        for key in tree.get(section, {}):
            if key not in allowed:
                where = f"[{section}] " if section else ""
                raise ConfigurationError(f"unknown config key {where}{key!r}")

    top = dict(tree.get("", {}))
    budget_d = dict(tree.get("budget", {}))
    backbone_d = dict(tree.get("backbone", {}))
    train_d = dict(tree.get("train", {}))

    weights = LossWeights(
        tau=float(train_d.pop("tau", 1.0)),
        lambda_base=float(train_d.pop("lambda_base", 10.0)),
        gamma=float(train_d.pop("gamma", 0.1)),
        distill_scope=train_d.pop("distill_scope", "exemplars_only"),
    )
    train_d.setdefault("seed", top.get("seed", 0))
    if "betas" in train_d:
        train_d["betas"] = tuple(train_d["betas"])
    try:
        train_cfg = TrainConfig(weights=weights, **train_d)
        backbone_cfg = BackboneConfig(**{
            k: tuple(v) if isinstance(v, list) else v for k, v in backbone_d.items()
        })
        budget = BudgetPolicy(budget_d.get("policy", "per_class"),
                              int(budget_d.get("amount", 20)))
        if "base_classes" in top:
            top["base_fraction"] = None
        cfg = ExperimentConfig(budget=budget, backbone=backbone_cfg,
                               train=train_cfg, **top)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {p}")
    return config_from_tree(parse_config_text(p.read_text()))


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply `section.key=value` (or `key=value`) dotted overrides in place."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} must look like key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) == 1:
            section, key = "", parts[0]
        elif len(parts) == 2:
            section, key = parts
        else:
            raise ConfigurationError(f"override path {dotted!r} has too many dots")
        tree.setdefault(section, {})[key] = _parse_scalar(raw)
    return tree


# ---------------------------------------------------------------------------
# named presets for every experiment family


def _small_scale_backbone(patch_size: int, channels: int) -> dict:
    return {"patch_size": patch_size, "num_hierarchies": 3, "embed_dims": [192],
            "heads": [6], "blocks_per_level": [4], "image_size": 32,
            "channels": channels}


def _desk_backbone(channels: int) -> dict:
    return {"patch_size": 2, "num_hierarchies": 3, "embed_dims": [64],
            "heads": [2], "blocks_per_level": [1], "image_size": 32,
            "channels": channels}


def _cifar_preset(increment: int) -> dict:
    return {
        "": {"name": f"cifar-b50-c{increment}", "dataset": "cifar100",
             "base_classes": 50, "increment": increment, "seed": 0},
        "budget": {"policy": "per_class", "amount": 20},
        "backbone": _small_scale_backbone(1, 3),
        "train": {"epochs_per_phase": 150 if increment == 2 else 250,
                  "batch_size": 128, "warmup_epochs": 10,
                  "tau": 1.0, "lambda_base": 10.0, "gamma": 0.1,
                  "distill_scope": "exemplars_only", "mixup_incremental": False},
    }


def _digits_preset(dataset: str) -> dict:
    return {
        "": {"name": f"{dataset}-2step", "dataset": dataset,
             "base_classes": 2, "increment": 2, "seed": 0},
        "budget": {"policy": "fixed_total", "amount": 4400},
        "backbone": _small_scale_backbone(2, 1 if dataset == "mnist" else 3),
        "train": {"epochs_per_phase": 150, "batch_size": 128, "warmup_epochs": 10,
                  "tau": 1.0, "lambda_base": 10.0, "gamma": 0.1,
                  "distill_scope": "exemplars_only", "mixup_incremental": False},
    }


def _imagenet_preset(name: str, dataset: str, base: int, increment: int,
                     batch: int) -> dict:
    return {
        "": {"name": name, "dataset": dataset, "base_classes": base,
             "increment": increment, "seed": 0},
        "budget": {"policy": "per_class", "amount": 20},
        "backbone": {"patch_size": 4, "num_hierarchies": 3,
                     "embed_dims": [96, 192, 384], "heads": [2, 2, 8],
                     "blocks_per_level": [3, 6, 12], "image_size": 224,
                     "channels": 3},
        "train": {"epochs_per_phase": 150 if increment == 2 else 250,
                  "batch_size": batch, "warmup_epochs": 20,
                  "tau": 0.3, "lambda_base": 4.0, "gamma": 0.05,
                  "distill_scope": "all_samples", "mixup_incremental": True},
    }


def _desk_preset(name: str, dataset: str) -> dict:
    # lambda_base 3 balances stability/plasticity at this tiny scale: the
    # growth rule compounds fast with B=C=2, and 10 over-pins the backbone
    return {
        "": {"name": name, "dataset": dataset, "base_classes": 2, "increment": 2,
             "seed": 0, "train_per_class": 200, "test_per_class": 100},
        "budget": {"policy": "per_class", "amount": 20},
        "backbone": _desk_backbone(1),
        "train": {"epochs_per_phase": 8, "batch_size": 64, "warmup_epochs": 1,
                  "tau": 1.0, "lambda_base": 3.0, "gamma": 0.1,
                  "distill_scope": "exemplars_only", "mixup_incremental": False},
    }


PRESETS: dict[str, dict] = {
    "cifar-b50-c10": _cifar_preset(10),
    "cifar-b50-c5": _cifar_preset(5),
    "cifar-b50-c2": _cifar_preset(2),
    "mnist-2step": _digits_preset("mnist"),
    "svhn-2step": _digits_preset("svhn"),
    "imagenet100-b50-c10": _imagenet_preset("imagenet100-b50-c10", "imagenet100", 50, 10, 384),
    "imagenet100-b50-c5": _imagenet_preset("imagenet100-b50-c5", "imagenet100", 50, 5, 384),
    "imagenet100-b50-c2": _imagenet_preset("imagenet100-b50-c2", "imagenet100", 50, 2, 384),
    "imagenet1k-b500-c100": _imagenet_preset("imagenet1k-b500-c100", "imagenet1k", 500, 100, 1024),
    "desk-mnist": _desk_preset("desk-mnist", "mnist"),
    "desk-synthetic": _desk_preset("desk-synthetic", "synthetic"),
}


def preset_tree(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        )
    return json.loads(json.dumps(PRESETS[name]))  # deep copy


def merge_trees(base: dict, extra: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, kv in extra.items():
        out.setdefault(section, {}).update(kv)
    return out


def resolve_config(preset: str | None = None, config_path: str | Path | None = None,
                   overrides: list[str] | None = None) -> ExperimentConfig:
    """Preset <- file <- --set overrides, then validate."""
    tree: dict = {}
    if preset:
        tree = merge_trees(tree, preset_tree(preset))
    if config_path:
        p = Path(config_path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        tree = merge_trees(tree, parse_config_text(p.read_text()))
    if overrides:
        tree = apply_overrides(tree, overrides)
    if not tree:
        raise ConfigurationError("need a --preset and/or --config")
    return config_from_tree(tree)
