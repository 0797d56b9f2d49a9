"""Metrics rows, the append-only CSV and grouped summaries."""

import math

import pytest

from sadag_lab.harness.metrics import (
    CSV_COLUMNS,
    MetricsRow,
    append_rows,
    format_bits,
    read_metrics,
    summarize,
)

pytestmark = pytest.mark.unit


def _row(run_id: str, top1: float, mode: str = "sadag", seed: int = 0) -> MetricsRow:
    return MetricsRow(run_id, mode, seed, "4", "4", top1, 0.5, 0.01, 0.05, 1.25)


def test_row_csv_rendering():
    assert _row("r1", 0.75).to_csv() == "r1,sadag,0,4,4,0.75,0.5,0.01,0.05,1.25"


def test_failure_row():
    row = MetricsRow.failure("r2", "bn-only", "generate", 3, "4", "4", 2.0)
    assert row.mode == "failed:bn-only:generate"
    assert row.failed
    assert math.isnan(row.top1)
    assert row.to_csv().split(",")[5:9] == ["nan"] * 4


def test_format_bits():
    assert format_bits(4) == "4"
    assert format_bits({"fc": 8, "conv1": 2}) == "conv1=2;fc=8"


def test_append_writes_header_once(tmp_path):
    path = tmp_path / "metrics.csv"
    append_rows(path, [_row("a", 0.5)])
    append_rows(path, [_row("b", 0.7)])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 3


def test_append_rejects_foreign_header(tmp_path):
    path = tmp_path / "metrics.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="header"):
        append_rows(path, [_row("a", 0.5)])


def test_separator_in_field_is_quoted(tmp_path):
    path = tmp_path / "metrics.csv"
    append_rows(path, [MetricsRow("a,b", "sadag", 0, "conv1=2;fc=8", "4", 0.5, 0.5, 0.5, 0.5, 0.5)])
    frame = read_metrics(path)
    assert frame["run_id"].tolist() == ["a,b"]
    assert frame["bits_w"].tolist() == ["conv1=2;fc=8"]


def test_floats_read_back_bit_for_bit(tmp_path):
    path = tmp_path / "metrics.csv"
    values = [0.1 + 0.2, 1.0 / 3.0, 2.0**-40, 123456.789012345678]
    append_rows(path, [MetricsRow("a", "sadag", 0, "4", "4", *values, 0.5)])
    row = read_metrics(path).iloc[0]
    assert [row["top1"], row["recon"], row["sharpness"], row["rho"]] == values


def test_read_and_summarize_exclude_failures(tmp_path):
    path = tmp_path / "metrics.csv"
    append_rows(
        path,
        [
            _row("a", 0.5, seed=0),
            _row("b", 0.7, seed=1),
            MetricsRow.failure("c", "sadag", "calibrate", 2, "4", "4", 0.1),
            _row("d", 0.9, mode="bn-only"),
        ],
    )
    frame = read_metrics(path)
    assert tuple(frame.columns) == CSV_COLUMNS
    assert len(frame) == 4
    assert frame["bits_w"].tolist() == ["4"] * 4

    summary = summarize(frame).set_index("mode")
    assert set(summary.index) == {"sadag", "bn-only"}
    assert summary.loc["sadag", "top1_mean"] == pytest.approx(0.6)
    assert summary.loc["sadag", "top1_count"] == 2
    assert math.isnan(summary.loc["bn-only", "top1_std"])
