"""End-to-end experiment driver.

Phase loop: train (base or incremental) -> update exemplar memory with the
just-trained model -> evaluate with both classifiers -> checkpoint. The
memory update precedes evaluation so the NCM classifier has refreshed means
for the new classes. metrics.json is rewritten after every phase, so a
partially completed run stays inspectable and resumable.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, FeatureExtractor
from .config import ExperimentConfig
from .data import DatasetBundle, assemble_phase, load_dataset, make_plan
from .exceptions import ConfigurationError, StateError
from .heads import CosineHead
from .losses import lambda_schedule
from .memory import ExemplarMemory
from .metrics import MetricsLog, evaluate_phase, save_confusion_csv
from .training import (align_base_rows, extract_features_eval,
                       imprint_for_phase, snapshot_teacher, train_base_phase,
                       train_incremental_phase)

log = logging.getLogger(__name__)


def set_determinism(seed: int, deterministic: bool) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
    if deterministic:
        torch.use_deterministic_algorithms(True)


def phase_dir(run_dir: Path, t: int) -> Path:
    return run_dir / f"phase{t}"


def save_checkpoint(run_dir: Path, t: int, model: FeatureExtractor, head: CosineHead,
                    memory: ExemplarMemory, metrics: MetricsLog,
                    config: ExperimentConfig, lambda_prev: float) -> None:
    pdir = phase_dir(run_dir, t)
    pdir.mkdir(parents=True, exist_ok=True)
    torch.save({
        "phase": t,
        "backbone_config": config.backbone.to_dict(),
        "model_state": model.state_dict(),
        "head_state": head.state(),
        "memory_state": memory.state(),
        "lambda_prev": lambda_prev,
        "config_hash": config.config_hash(),
    }, pdir / "model.ckpt")
    memory.save_manifest(pdir / "memory.json")
    (pdir / "metrics.json").write_text(json.dumps(metrics.rows[t].to_dict(), indent=2))
    metrics.save(run_dir / "metrics.json")


def load_checkpoint(path: Path) -> dict:
    if not path.is_file():
        raise StateError(f"checkpoint not found: {path}")
    return torch.load(path, weights_only=False)


def restore_from_checkpoint(ckpt: dict) -> tuple[FeatureExtractor, CosineHead, ExemplarMemory, float]:
    model = FeatureExtractor(BackboneConfig.from_dict(ckpt["backbone_config"]))
    model.load_state_dict(ckpt["model_state"])
    head = CosineHead.from_state(ckpt["head_state"])
    memory = ExemplarMemory.from_state(ckpt["memory_state"])
    return model, head, memory, ckpt.get("lambda_prev", 0.0)


def last_complete_phase(run_dir: Path) -> int | None:
    t = None
    for candidate in sorted(run_dir.glob("phase*")):
        idx = int(candidate.name.replace("phase", ""))
        if (candidate / "model.ckpt").is_file():
            t = idx if t is None or idx > t else t
    return t


def _update_memory(memory: ExemplarMemory, model, dataset: DatasetBundle,
                   phase_data) -> None:
    """Herd the phase's new classes into memory and refresh all class means."""
    new_classes = {}
    for cls in sorted(set(phase_data.new_labels.tolist())):
        sel = phase_data.new_labels == cls
        images = phase_data.new_images[sel]
        feats = extract_features_eval(model, images, dataset)
        indices = phase_data.new_dataset_indices[sel].tolist()
        new_classes[cls] = (feats, indices, images)
    memory.update(new_classes, lambda imgs: extract_features_eval(model, imgs, dataset))
    memory.check_budget()


def run_experiment(config: ExperimentConfig, resume_dir: str | Path | None = None) -> Path:
    """Run all phases; returns the run directory."""
    set_determinism(config.seed, config.deterministic)
    dataset = load_dataset(config.dataset, config.data_root,
                           config.train_per_class, config.test_per_class,
                           subsample_seed=config.seed)
    if dataset.image_size != config.backbone.image_size:
        raise ConfigurationError(
            f"backbone image_size {config.backbone.image_size} does not match "
            f"dataset {dataset.name} ({dataset.image_size})"
        )
    if dataset.channels != config.backbone.channels:
        raise ConfigurationError(
            f"backbone channels {config.backbone.channels} does not match "
            f"dataset {dataset.name} ({dataset.channels})"
        )
    plan = make_plan(dataset.num_classes, config.base, config.increment, config.seed)

    if resume_dir is not None:
        run_dir = Path(resume_dir)
        done = last_complete_phase(run_dir)
        if done is None:
            raise StateError(f"nothing to resume under {run_dir}")
        ckpt = load_checkpoint(phase_dir(run_dir, done) / "model.ckpt")
        if ckpt["config_hash"] != config.config_hash():
            raise ConfigurationError(
                "resume config differs from the checkpointed experiment"
            )
        model, head, memory, lambda_prev = restore_from_checkpoint(ckpt)
        metrics = MetricsLog.load(run_dir / "metrics.json")
        metrics.rows = metrics.rows[: done + 1]
        start_phase = done + 1
        log.info("resuming %s from phase %d", run_dir, start_phase)
    else:
        run_dir = Path(config.output_dir) / config.name
        run_dir.mkdir(parents=True, exist_ok=True)
        model = FeatureExtractor(config.backbone)
        head = CosineHead(config.backbone.feature_dim, plan.base_count)
        memory = ExemplarMemory(config.budget)
        metrics = MetricsLog(config_hash=config.config_hash())
        lambda_prev = config.train.weights.lambda_base
        start_phase = 0
    config.save(run_dir / "config_resolved.toml")

    for t in range(start_phase, plan.num_phases):
        tic = time.time()
        phase_data = assemble_phase(plan, t, memory, dataset)
        lambda_t = 0.0
        if t == 0:
            train_base_phase(model, head, phase_data, config.train, dataset)
            align_base_rows(model, head, phase_data, dataset)
        else:
            teacher_model, teacher_head = snapshot_teacher(model, head)
            old = plan.classes_up_to(t - 1) if config.train.lambda_growth == "cumulative" \
                else plan.base_count
            lambda_t = lambda_schedule(lambda_prev, old, plan.increment)
            imprint_for_phase(model, head, phase_data, dataset)
            train_incremental_phase(model, head, teacher_model, teacher_head,
                                    phase_data, config.train, dataset, lambda_t)
            lambda_prev = lambda_t
        _update_memory(memory, model, dataset, phase_data)
        row, conf = evaluate_phase(model, head, memory, phase_data, plan, t,
                                   dataset, lambda_used=lambda_t,
                                   wall_clock_s=time.time() - tic)
        metrics.append(row)
        save_checkpoint(run_dir, t, model, head, memory, metrics, config, lambda_prev)
        save_confusion_csv(conf, phase_dir(run_dir, t) / f"confusion_phase{t}.csv")
        log.info("phase %d/%d acc %.4f ncm %.4f lambda %.3f (%.1fs)",
                 t, plan.num_increments, row.acc_overall.value,
                 row.acc_ncm_overall.value, lambda_t, row.wall_clock_s)

    (run_dir / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2))
    return run_dir


def run_repeats(config: ExperimentConfig, repeats: int | None = None,
                parallel: bool = False) -> Path:
    """Sequential (or subprocess-parallel) repeats with distinct seeds.

    Writes rep{i}/ run directories plus an aggregate metrics_aggregate.json
    with mean and std of the headline metrics.
    """
    k = repeats if repeats is not None else config.repeats
    base_dir = Path(config.output_dir) / config.name
    if k <= 1:
        return run_experiment(config)
    rep_configs = []
    for i in range(k):
        rep = dataclasses.replace(
            config, seed=config.seed + i, repeats=1,
            output_dir=str(base_dir), name=f"rep{i}",
            train=dataclasses.replace(config.train, seed=config.seed + i),
        )
        rep_configs.append(rep)
    if parallel:
        _run_parallel(rep_configs)
    else:
        for rep in rep_configs:
            run_experiment(rep)
    aggregate_repeats(base_dir, k)
    return base_dir


def _run_parallel(rep_configs) -> None:
    import concurrent.futures

    with concurrent.futures.ProcessPoolExecutor(max_workers=min(4, len(rep_configs))) as pool:
        futures = [pool.submit(run_experiment, rep) for rep in rep_configs]
        for f in futures:
            f.result()


def aggregate_repeats(base_dir: Path, k: int) -> dict:
    """Mean and std of each summary metric across rep directories."""
    summaries = []
    for i in range(k):
        log_path = base_dir / f"rep{i}" / "metrics.json"
        summaries.append(MetricsLog.load(log_path).summary())
    keys = [key for key in summaries[0] if isinstance(summaries[0][key], float)]
    agg = {"repeats": k}
    for key in keys:
        vals = np.array([s[key] for s in summaries], dtype=np.float64)
        agg[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if k > 1 else 0.0}
    (base_dir / "metrics_aggregate.json").write_text(json.dumps(agg, indent=2))
    return agg
