import csv
import json

import pytest

from cilforge.exceptions import InputError
from cilforge.metrics import Fraction, MetricsLog, PhaseRow, confusion_matrix, save_confusion_csv
from cilforge.plotting import emit_plots


@pytest.fixture
def fake_run(tmp_path):
    log = MetricsLog(config_hash="deadbeef")
    log.append(PhaseRow(0, 2, Fraction(9, 10), Fraction(8, 10),
                        [Fraction(9, 10)], [Fraction(8, 10)]))
    log.append(PhaseRow(1, 4, Fraction(14, 20), Fraction(13, 20),
                        [Fraction(6, 10), Fraction(8, 10)],
                        [Fraction(6, 10), Fraction(7, 10)]))
    log.save(tmp_path / "metrics.json")
    import torch
    pdir = tmp_path / "phase1"
    pdir.mkdir()
    mat = confusion_matrix(torch.tensor([0, 1, 2, 3]), torch.tensor([0, 1, 2, 2]), 4)
    save_confusion_csv(mat, pdir / "confusion_phase1.csv")
    return tmp_path


class TestEmitPlots:
    def test_artifacts_written(self, fake_run):
        written = emit_plots(fake_run)
        names = {p.name for p in written}
        assert {"accuracy_curve.csv", "accuracy_curve.png",
                "confusion_grid.png", "summary.json"} <= names

    def test_curve_csv_matches_metrics_exactly(self, fake_run):
        emit_plots(fake_run)
        with open(fake_run / "accuracy_curve.csv") as fh:
            rows = list(csv.DictReader(fh))
        metrics = json.loads((fake_run / "metrics.json").read_text())
        for row, phase in zip(rows, metrics["phases"]):
            assert float(row["acc_overall"]) == phase["acc_overall"]["value"]
            assert float(row["acc_ncm"]) == phase["acc_ncm"]["value"]

    def test_regeneration_identical(self, fake_run):
        emit_plots(fake_run)
        first = (fake_run / "accuracy_curve.csv").read_bytes()
        emit_plots(fake_run)
        assert (fake_run / "accuracy_curve.csv").read_bytes() == first

    def test_single_phase_curve(self, tmp_path):
        log = MetricsLog()
        log.append(PhaseRow(0, 2, Fraction(9, 10), Fraction(9, 10),
                            [Fraction(9, 10)], [Fraction(9, 10)]))
        log.save(tmp_path / "metrics.json")
        written = emit_plots(tmp_path)
        assert any(p.name == "accuracy_curve.png" for p in written)

    def test_missing_metrics_error_names_file(self, tmp_path):
        with pytest.raises(InputError, match="metrics.json"):
            emit_plots(tmp_path)

    def test_summary_matches_log(self, fake_run):
        emit_plots(fake_run)
        summary = json.loads((fake_run / "summary.json").read_text())
        log = MetricsLog.load(fake_run / "metrics.json")
        assert summary == log.summary()
