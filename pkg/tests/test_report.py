import json
import math

import numpy as np
import pytest

from errors import ReportError
from experiments.config import ExperimentConfig
from experiments.report import (
    CSV_COLUMNS, MreRecord, TrialRecord, build_manifest, format_float, histogram,
    read_trials_csv, summarize, write_histogram_csv, write_json, write_trials_csv,
)
from experiments.simple_gaussian import squared_errors
from spd_core import SpdMatrix


def _records():
    return [
        TrialRecord(0, 6.0, "hf", 1.0, 2.0, 0.5),
        TrialRecord(1, 6.0, "hf", 3.0, 4.0, 0.4),
        TrialRecord(2, 6.0, "hf", 5.0, 6.0, 0.3),
        TrialRecord(0, 6.0, "emf", 0.5, math.inf, -0.1),
        TrialRecord(1, 6.0, "emf", 0.7, 1.0, 0.2),
        TrialRecord(0, 6.0, "mrmf", 0.1, 0.2, 0.3, mahalanobis=9.0, wall_ms=1.5),
        TrialRecord(1, 6.0, "mrmf", math.nan, math.nan, math.nan),
        TrialRecord(0, 56.0, "mrmf", 0.01, 0.02, 0.3, mahalanobis=11.0),
    ]


def test_format_float():
    assert format_float(math.inf) == "inf"
    assert format_float(-math.inf) == "-inf"
    assert format_float(math.nan) == "nan"
    assert format_float(None) == ""
    assert format_float(0.1) == "0.1"
    assert float(format_float(1 / 3)) == 1 / 3


def test_csv_header_and_round_trip(tmp_path):
    path = tmp_path / "trials.csv"
    records = _records()
    write_trials_csv(path, records)
    assert path.read_text(encoding="utf-8").splitlines()[0] == ",".join(CSV_COLUMNS)
    assert ",inf," in path.read_text(encoding="utf-8")
    loaded = read_trials_csv(path)
    assert len(loaded) == len(records)
    assert loaded[3].se_intrinsic == math.inf
    assert loaded[0].mahalanobis is None and loaded[5].mahalanobis == 9.0
    assert loaded[5].wall_ms == 1.5
    assert math.isnan(loaded[6].se_frobenius)


@pytest.mark.parametrize("content", [
    "",
    "trial,budget\n0,6\n",
    ",".join(CSV_COLUMNS) + "\n",
    ",".join(CSV_COLUMNS) + "\nx,6,hf,1,1,1,,0\n",
    ",".join(CSV_COLUMNS) + "\n0,6,hf,abc,1,1,,0\n",
    ",".join(CSV_COLUMNS) + "\n0,6,hf,1\n",
])
def test_read_rejects_bad_files(tmp_path, content):
    path = tmp_path / "bad.csv"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ReportError):
        read_trials_csv(path)


def test_read_missing_file(tmp_path):
    with pytest.raises(ReportError):
        read_trials_csv(tmp_path / "absent.csv")


def test_summary_statistics():
    summary = summarize(_records(), [MreRecord(0, 6.0, "mrmf", 0.2), MreRecord(1, 6.0, "mrmf", 0.4)])
    hf = summary["6.0"]["hf"]
    assert hf["trials"] == 3
    assert hf["se_frobenius"] == {"median": 3.0, "mean": 3.0}
    assert hf["indefinite_fraction"] == 0.0
    emf = summary["6.0"]["emf"]
    assert emf["se_intrinsic"]["mean"] == "inf"
    assert emf["indefinite_fraction"] == 0.5
    mrmf = summary["6.0"]["mrmf"]
    assert mrmf["se_frobenius"]["median"] == 0.1
    assert mrmf["mean_mahalanobis"] == 9.0
    assert mrmf["median_mre"] == pytest.approx(0.3)
    assert summary["56.0"]["mrmf"]["indefinite_fraction"] == 0.0
    json.dumps(summary)


def test_nearly_singular_estimate_counts_as_indefinite():
    se_frob, se_intr, min_eig = squared_errors(np.diag([1.0, 1e-14]), SpdMatrix(np.eye(2)))
    assert min_eig > 0
    assert math.isinf(se_intr)
    record = TrialRecord(0, 6.0, "emf", se_frob, se_intr, min_eig)
    assert record.is_indefinite
    assert summarize([record])["6.0"]["emf"]["indefinite_fraction"] == 1.0
    assert not TrialRecord(0, 6.0, "emf", 1.0, 2.0, 0.5).is_indefinite


def test_summary_requires_records():
    with pytest.raises(ReportError):
        summarize([])


def test_histogram_counts(tmp_path):
    rows = histogram(_records(), 4)
    emf_intrinsic = [r for r in rows if r["estimator"] == "emf" and r["metric"] == "se_intrinsic"]
    assert sum(r["count"] for r in emf_intrinsic) == 2
    assert any(r["log10_low"] == "inf" and r["count"] == 1 for r in emf_intrinsic)
    hf = [r for r in rows if r["estimator"] == "hf" and r["metric"] == "se_frobenius"]
    assert len(hf) == 4 and sum(r["count"] for r in hf) == 3
    path = tmp_path / "histogram.csv"
    write_histogram_csv(path, rows)
    assert path.read_text(encoding="utf-8").startswith("budget,estimator,metric")


def test_manifest_and_json(tmp_path):
    config = ExperimentConfig(name="m", seed=7)
    manifest = build_manifest(config, {"6.0": 0.1}, "1.0.0")
    assert manifest["seed"] == 7
    assert manifest["config_sha256"] == config.config_hash()
    assert manifest["versions"]["package"] == "1.0.0"
    path = tmp_path / "manifest.json"
    write_json(path, manifest)
    assert json.loads(path.read_text(encoding="utf-8"))["selected_lambda"] == {"6.0": 0.1}
