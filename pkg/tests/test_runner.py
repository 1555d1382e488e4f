import json

import pytest
import torch

from cilforge.config import resolve_config
from cilforge.exceptions import ConfigurationError
from cilforge.metrics import MetricsLog
from cilforge.runner import (load_checkpoint, phase_dir,
                             restore_from_checkpoint, run_experiment, run_repeats)


def _micro_config(tmp_path, name="run", **extra):
    overrides = [
        f'output_dir="{tmp_path}"', f'name="{name}"',
        "train.epochs_per_phase=1", "train_per_class=12", "test_per_class=6",
    ] + [f"{k}={v}" for k, v in extra.items()]
    return resolve_config(preset="desk-synthetic", overrides=overrides)


@pytest.mark.slow
class TestRunExperiment:
    def test_phase_artifacts_written(self, tmp_path):
        run_dir = run_experiment(_micro_config(tmp_path))
        log = MetricsLog.load(run_dir / "metrics.json")
        assert log.num_phases == 5
        assert [r.seen_classes for r in log.rows] == [2, 4, 6, 8, 10]
        # per-phase rows are lower-triangular
        for t, row in enumerate(log.rows):
            assert len(row.acc_per_task) == t + 1
        assert (run_dir / "plan.json").is_file()

    def test_lambda_trace_matches_schedule(self, tmp_path):
        cfg = _micro_config(tmp_path, name="lam")
        run_dir = run_experiment(cfg)
        log = MetricsLog.load(run_dir / "metrics.json")
        import math
        lam = cfg.train.weights.lambda_base
        expected = [0.0]
        for t in range(1, 5):
            lam = lam * math.sqrt((2 * t + 2) / 2)
            expected.append(lam)
        got = [r.lambda_used for r in log.rows]
        assert got == pytest.approx(expected, rel=1e-9)

    def test_lambda_literal_base_reading(self, tmp_path):
        cfg = _micro_config(tmp_path, name="lamlit",
                            **{"train.lambda_growth": '"base_constant"'})
        run_dir = run_experiment(cfg)
        log = MetricsLog.load(run_dir / "metrics.json")
        import math
        base = cfg.train.weights.lambda_base
        factor = math.sqrt((2 + 2) / 2)  # B fixed at the plan's base count
        expected = [0.0] + [base * factor ** t for t in range(1, 5)]
        got = [r.lambda_used for r in log.rows]
        assert got == pytest.approx(expected, rel=1e-9)

    def test_memory_budget_every_phase(self, tmp_path):
        run_dir = run_experiment(_micro_config(tmp_path, name="mem"))
        for t in range(5):
            manifest = json.loads((phase_dir(run_dir, t) / "memory.json").read_text())
            counts = [len(v) for v in manifest["classes"].values()]
            assert len(counts) == 2 * (t + 1)
            assert all(c <= 20 for c in counts)

    def test_resume_reproduces_run(self, tmp_path):
        full_dir = run_experiment(_micro_config(tmp_path, name="full"))
        full = MetricsLog.load(full_dir / "metrics.json")

        # fresh copy stopped after phase 2, then resumed
        part_cfg = _micro_config(tmp_path, name="part")
        import cilforge.runner as runner_mod
        original = runner_mod.run_experiment
        part_dir = run_experiment_stopping_after(part_cfg, stop_after=2)
        resumed_dir = original(part_cfg, resume_dir=part_dir)
        resumed = MetricsLog.load(resumed_dir / "metrics.json")

        assert resumed.num_phases == 5
        for a, b in zip(full.rows, resumed.rows):
            assert a.acc_overall.to_dict() == b.acc_overall.to_dict()
            assert a.acc_ncm_overall.to_dict() == b.acc_ncm_overall.to_dict()

    def test_resume_rejects_changed_config(self, tmp_path):
        cfg = _micro_config(tmp_path, name="guard")
        run_dir = run_experiment(cfg)
        other = _micro_config(tmp_path, name="guard", **{"train.tau": 0.5})
        with pytest.raises(ConfigurationError):
            run_experiment(other, resume_dir=run_dir)

    def test_determinism_same_seed(self, tmp_path):
        a = run_experiment(_micro_config(tmp_path, name="det-a"))
        b = run_experiment(_micro_config(tmp_path, name="det-b"))
        ja = json.loads((a / "metrics.json").read_text())
        jb = json.loads((b / "metrics.json").read_text())
        for ra, rb in zip(ja["phases"], jb["phases"]):
            assert ra["acc_overall"] == rb["acc_overall"]
            assert ra["acc_per_task"] == rb["acc_per_task"]

    def test_checkpoint_restores_identical_model(self, tmp_path):
        run_dir = run_experiment(_micro_config(tmp_path, name="ckpt"))
        ckpt = load_checkpoint(phase_dir(run_dir, 4) / "model.ckpt")
        model, head, memory, _ = restore_from_checkpoint(ckpt)
        x = torch.randn(2, 1, 32, 32)
        model.eval()
        with torch.no_grad():
            pooled, _ = model.extract_features(x)
            logits = head(pooled)
        assert logits.shape == (2, 10)
        assert len(memory.classes) == 10

    def test_mismatched_backbone_rejected(self, tmp_path):
        cfg = _micro_config(tmp_path, name="bad", **{"backbone.image_size": 16})
        with pytest.raises(ConfigurationError):
            run_experiment(cfg)

    def test_degenerate_plan_single_phase(self, tmp_path):
        # all classes in the base phase: plain supervised training, one row
        cfg = _micro_config(tmp_path, name="flat", base_classes=10)
        run_dir = run_experiment(cfg)
        log = MetricsLog.load(run_dir / "metrics.json")
        assert log.num_phases == 1
        assert log.rows[0].seen_classes == 10
        summary = log.summary()
        assert summary["forgetting"] == 0.0
        assert summary["forgetting_defined"] is False


@pytest.mark.slow
class TestBasePhaseQuality:
    def test_two_class_base_reaches_95_percent(self, tmp_path):
        # desk preset, 5 epochs, phase 0 only: near-saturated two-class task
        cfg = resolve_config(preset="desk-synthetic", overrides=[
            f'output_dir="{tmp_path}"', 'name="base95"',
            "train.epochs_per_phase=5",
        ])
        from cilforge.data import assemble_phase, load_dataset, make_plan
        from cilforge.backbone import FeatureExtractor
        from cilforge.heads import CosineHead
        from cilforge.memory import BudgetPolicy, ExemplarMemory
        from cilforge.runner import set_determinism, _update_memory
        from cilforge.training import align_base_rows, train_base_phase
        from cilforge.metrics import evaluate_phase

        set_determinism(0, True)
        ds = load_dataset(cfg.dataset, None, cfg.train_per_class,
                          cfg.test_per_class, subsample_seed=0)
        plan = make_plan(ds.num_classes, cfg.base, cfg.increment, cfg.seed)
        memory = ExemplarMemory(cfg.budget)
        pd = assemble_phase(plan, 0, memory, ds)
        model = FeatureExtractor(cfg.backbone)
        head = CosineHead(cfg.backbone.feature_dim, plan.base_count)
        train_base_phase(model, head, pd, cfg.train, ds)
        align_base_rows(model, head, pd, ds)
        _update_memory(memory, model, ds, pd)
        row, _ = evaluate_phase(model, head, memory, pd, plan, 0, ds)
        assert row.acc_overall.value >= 0.95


@pytest.mark.slow
class TestRepeats:
    def test_aggregate_mean_std(self, tmp_path):
        cfg = _micro_config(tmp_path, name="reps")
        base = run_repeats(cfg, repeats=2)
        agg = json.loads((base / "metrics_aggregate.json").read_text())
        assert agg["repeats"] == 2
        assert "average_accuracy" in agg
        assert set(agg["average_accuracy"]) == {"mean", "std"}
        for i in range(2):
            assert (base / f"rep{i}" / "metrics.json").is_file()


def run_experiment_stopping_after(config, stop_after: int):
    """Run phases 0..stop_after only (kill between phases), leaving a
    resumable directory."""
    from pathlib import Path
    from unittest import mock

    from cilforge import runner as runner_mod

    class StopRun(Exception):
        pass

    real_save = runner_mod.save_checkpoint

    def stopping_save(run_dir, t, *args, **kwargs):
        real_save(run_dir, t, *args, **kwargs)
        if t == stop_after:
            raise StopRun()

    with mock.patch.object(runner_mod, "save_checkpoint", stopping_save):
        try:
            runner_mod.run_experiment(config)
        except StopRun:
            pass
    return Path(config.output_dir) / config.name
