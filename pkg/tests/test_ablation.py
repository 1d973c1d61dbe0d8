"""Tests for the matched PAR / no-PAR comparison."""
import csv

import pytest

from ablation import ABLATION_CSV, COLUMNS, AblationReport, ArmResult, run_par_ablation, write_ablation_csv
from config_manager import RunConfig, apply_values
from trainer import FINAL_CHECKPOINT_NAME
from validation import ConfigError

TINY = apply_values(RunConfig(), {
    "dataset.image_size": "16",
    "encoder.blocks": "4:2:1, 4:1:2",
    "train.iterations": "2",
    "train.lambda_par": "0",
    "eval.episodes": "2",
    "eval.runs": "1",
    "eval.probe_episodes": "2",
})


def _row(pair, arm, miou, align, seg):
    return ArmResult(pair, pair, arm, 1.0 if arm == "par" else 0.0, miou, 0.5, align, seg)


def test_report_comparisons():
    """Gains and win counts are computed over matched pairs."""
    report = AblationReport([
        _row(0, "par", 0.6, 0.1, 0.3), _row(0, "no_par", 0.5, 0.2, 0.4),
        _row(1, "par", 0.4, 0.3, 0.5), _row(1, "no_par", 0.5, 0.2, 0.4),
    ])
    assert report.mean_iou_gain() == pytest.approx(0.0)
    assert report.alignment_wins() == 1
    assert report.convergence_wins() == 1
    assert "alignment wins 1/2" in report.summary()


def test_report_ignores_unmatched_rows():
    """A pair with only one arm does not count."""
    report = AblationReport([_row(0, "par", 0.6, 0.1, 0.3)])
    assert report.mean_iou_gain() == 0.0
    assert report.alignment_wins() == 0


def test_write_ablation_csv(tmp_path):
    """One row per arm under a fixed header."""
    report = AblationReport([_row(0, "par", 0.6, 0.1, 0.3), _row(0, "no_par", 0.5, 0.2, 0.4)])
    path = write_ablation_csv(report, tmp_path / ABLATION_CSV)
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == COLUMNS
    assert [r[2] for r in rows[1:]] == ["par", "no_par"]


def test_run_par_ablation(tmp_path):
    """Both arms of every pair are trained, evaluated and written out."""
    report = run_par_ablation(TINY, pairs=2, out_dir=tmp_path)
    assert [(r.pair, r.arm) for r in report.results] == [(0, "par"), (0, "no_par"), (1, "par"), (1, "no_par")]
    assert [r.seed for r in report.results] == [0, 0, 1, 1]
    assert report.arm("par")[0].lambda_par == 1.0
    assert report.arm("no_par")[0].lambda_par == 0.0
    for r in report.results:
        assert 0.0 <= r.mean_iou <= 1.0
        assert r.align_distance >= 0.0
    assert (tmp_path / "pair1" / "no_par" / FINAL_CHECKPOINT_NAME).is_file()
    assert report.csv_path == tmp_path / ABLATION_CSV
    assert (tmp_path / "config.ini").is_file()


def test_run_par_ablation_without_output():
    """The comparison runs in memory when no directory is given."""
    report = run_par_ablation(TINY, pairs=1)
    assert len(report.results) == 2
    assert report.csv_path is None


def test_run_par_ablation_rejects_zero_pairs():
    """Test a non-positive pair count."""
    with pytest.raises(ConfigError):
        run_par_ablation(TINY, pairs=0)
