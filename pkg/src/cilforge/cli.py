"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .config import load_config, resolve_config
from .exceptions import CilforgeError, ConfigurationError

log = logging.getLogger(__name__)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
def main(verbose: bool):
    """Incremental-learning experiments with the nested transformer."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Config file (TOML-style sections).")
@click.option("--preset", default=None, help="Named preset to start from.")
@click.option("--set", "overrides", multiple=True,
              help="Override any key: section.key=value (repeatable).")
@click.option("--resume", "resume_dir", type=click.Path(), default=None,
              help="Existing run directory to continue.")
@click.option("--repeats", type=int, default=None,
              help="Run k repeats with consecutive seeds and aggregate.")
@click.option("--parallel-repeats", is_flag=True,
              help="Run repeats as parallel processes.")
def run(config_path, preset, overrides, resume_dir, repeats, parallel_repeats):
    """Run a full incremental experiment."""
    from .runner import run_experiment, run_repeats

    try:
        if resume_dir:
            resolved = Path(resume_dir) / "config_resolved.toml"
            config = load_config(resolved) if not (config_path or preset or overrides) \
                else resolve_config(preset, config_path, list(overrides))
        else:
            config = resolve_config(preset, config_path, list(overrides))
    except ConfigurationError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        if resume_dir:
            out = run_experiment(config, resume_dir=resume_dir)
        elif (repeats or config.repeats) > 1:
            out = run_repeats(config, repeats, parallel=parallel_repeats)
        else:
            out = run_experiment(config)
    except ConfigurationError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (CilforgeError, RuntimeError) as exc:
        click.echo(f"run aborted: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(f"run complete: {out}")


@main.command()
@click.argument("run_dir", type=click.Path(exists=True))
def plot(run_dir):
    """Emit accuracy curves and confusion grids from persisted metrics."""
    from .plotting import emit_plots

    try:
        written = emit_plots(run_dir)
    except CilforgeError as exc:
        click.echo(f"plot error: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    for path in written:
        click.echo(str(path))


@main.command("eval")
@click.argument("run_dir", type=click.Path(exists=True))
@click.option("--phase", "-t", type=int, required=True, help="Checkpoint phase to load.")
@click.option("--emit-cams", type=int, default=0,
              help="Also write this many attention overlays per new class.")
def eval_cmd(run_dir, phase, emit_cams):
    """Re-evaluate a phase checkpoint; optionally dump attention overlays."""
    import torch

    from .data import assemble_phase, load_dataset, make_plan, to_float
    from .gradcam import grad_cam, save_cam_overlays
    from .metrics import evaluate_phase
    from .runner import load_checkpoint, phase_dir, restore_from_checkpoint

    run_dir = Path(run_dir)
    try:
        config = load_config(run_dir / "config_resolved.toml")
        ckpt = load_checkpoint(phase_dir(run_dir, phase) / "model.ckpt")
        model, head, memory, _ = restore_from_checkpoint(ckpt)
        dataset = load_dataset(config.dataset, config.data_root,
                               config.train_per_class, config.test_per_class,
                               subsample_seed=config.seed)
        plan = make_plan(dataset.num_classes, config.base, config.increment, config.seed)
        phase_data = assemble_phase(plan, phase, memory, dataset)
        row, _ = evaluate_phase(model, head, memory, phase_data, plan, phase, dataset)
    except ConfigurationError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (CilforgeError, RuntimeError) as exc:
        click.echo(f"eval failed: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    click.echo(json.dumps(row.to_dict(), indent=2))

    if emit_cams > 0:
        out_dir = run_dir / f"cams_phase{phase}"
        model.eval()
        for cls in sorted(set(phase_data.new_labels.tolist())):
            sel = torch.nonzero(phase_data.new_labels == cls).flatten()[:emit_cams]
            images = phase_data.new_images[sel]
            x = to_float(images, dataset.mean, dataset.std)
            cams = grad_cam(model, head, x,
                            torch.full((len(sel),), cls, dtype=torch.long),
                            build_graph=False)
            save_cam_overlays(cams, x, out_dir, phase, indices=sel.tolist())
        click.echo(f"attention overlays in {out_dir}")


if __name__ == "__main__":
    main()
