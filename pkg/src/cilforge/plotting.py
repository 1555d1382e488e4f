"""Plot emission from persisted run artifacts.

Reads only metrics.json and the per-phase confusion CSVs, never the model,
so plots regenerate identically from a finished or partial run. Alongside
each PNG the underlying numbers are written as CSV.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .exceptions import InputError
from .metrics import MetricsLog


def _load_confusions(run_dir: Path) -> list[tuple[int, list[list[int]]]]:
    out = []
    for path in sorted(run_dir.glob("phase*/confusion_phase*.csv")):
        t = int(path.stem.replace("confusion_phase", ""))
        with open(path) as fh:
            rows = list(csv.reader(fh))[1:]
        out.append((t, [[int(v) for v in row[1:]] for row in rows]))
    return out


def emit_plots(run_dir: str | Path) -> list[Path]:
    """Accuracy-vs-phase curve plus a confusion-matrix grid; returns paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.json"
    if not metrics_path.is_file():
        raise InputError(f"missing metrics file: {metrics_path}")
    log = MetricsLog.load(metrics_path)
    if not log.rows:
        raise InputError(f"{metrics_path} has no evaluated phases")

    written = []
    phases = [r.phase for r in log.rows]
    acc = [r.acc_overall.value for r in log.rows]
    ncm = [r.acc_ncm_overall.value for r in log.rows]

    curve_csv = run_dir / "accuracy_curve.csv"
    with open(curve_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "acc_overall", "acc_ncm"])
        for p, a, n in zip(phases, acc, ncm):
            writer.writerow([p, repr(a), repr(n)])
    written.append(curve_csv)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(phases, [a * 100 for a in acc], marker="o", label="softmax")
    ax.plot(phases, [n * 100 for n in ncm], marker="s", label="NCM")
    ax.set_xlabel("phase")
    ax.set_ylabel("accuracy on seen classes (%)")
    ax.set_xticks(phases)
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend()
    curve_png = run_dir / "accuracy_curve.png"
    fig.tight_layout()
    fig.savefig(curve_png, dpi=150)
    plt.close(fig)
    written.append(curve_png)

    confusions = _load_confusions(run_dir)
    if confusions:
        cols = len(confusions)
        fig, axes = plt.subplots(1, cols, figsize=(3.2 * cols, 3.2))
        if cols == 1:
            axes = [axes]
        for ax, (t, mat) in zip(axes, confusions):
            ax.imshow(mat, cmap="Blues")
            ax.set_title(f"phase {t}")
            ax.set_xlabel("predicted")
            ax.set_ylabel("true")
        grid_png = run_dir / "confusion_grid.png"
        fig.tight_layout()
        fig.savefig(grid_png, dpi=150)
        plt.close(fig)
        written.append(grid_png)

    summary_path = run_dir / "summary.json"
    summary_path.write_text(json.dumps(log.summary(), indent=2))
    written.append(summary_path)
    return written
