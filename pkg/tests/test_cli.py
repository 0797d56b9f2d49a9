"""Command-line surface driven through click's test runner."""

import pytest
from click.testing import CliRunner

from sadag_lab.cli import cli
from sadag_lab.harness.runner import ExperimentRunner
from sadag_lab.harness.toy_data import VAL_FILE


@pytest.fixture
def config_file(small_config, tmp_path):
    path = tmp_path / "small.conf"
    path.write_text(small_config.to_text())
    return path


@pytest.mark.unit
def test_help_lists_commands():
    result = CliRunner().invoke(cli, ["--help"])
    assert result.exit_code == 0
    for command in ("make-data", "train-teacher", "generate", "calibrate", "evaluate", "sweep"):
        assert command in result.output


@pytest.mark.unit
def test_make_data(config_file, tmp_path):
    result = CliRunner().invoke(cli, ["make-data", "-c", str(config_file), "-o", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert "64 train / 32 val images" in result.output


@pytest.mark.unit
def test_unknown_override_fails_cleanly(config_file, tmp_path):
    result = CliRunner().invoke(
        cli, ["make-data", "-c", str(config_file), "-o", str(tmp_path), "--set", "colour=3"]
    )
    assert result.exit_code != 0
    assert "colour" in result.output


@pytest.mark.unit
def test_bad_config_line_is_reported(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("seed = 1\nseed = 2\n")
    result = CliRunner().invoke(cli, ["make-data", "-c", str(path), "-o", str(tmp_path)])
    assert result.exit_code != 0
    assert "line 2" in result.output


@pytest.mark.integration
@pytest.mark.slow
def test_run_then_evaluate(config_file, tmp_path):
    out = str(tmp_path / "runs")
    result = CliRunner().invoke(cli, ["run", "-c", str(config_file), "-o", out])
    assert result.exit_code == 0, result.output
    assert "mode=sadag" in result.output

    result = CliRunner().invoke(cli, ["evaluate", "-c", str(config_file), "-o", out])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "runs" / "metrics.csv").read_text().count("\n") == 3


@pytest.mark.integration
@pytest.mark.slow
def test_select_uses_given_teacher_and_pool(config_file, small_config, tmp_path):
    built = ExperimentRunner(small_config, tmp_path / "built")
    train, val = built.ensure_data()
    built.ensure_teacher(train, val)
    teacher = tmp_path / "teacher.sadg"
    teacher.write_bytes(built.teacher_path.read_bytes())
    pool = tmp_path / "pool.sadd"
    pool.write_bytes((built.data_dir / VAL_FILE).read_bytes())

    out = tmp_path / "runs"
    args = ["select", "-c", str(config_file), "-o", str(out)]
    result = CliRunner().invoke(cli, args + ["--teacher", str(teacher), "--pool", str(pool)])
    assert result.exit_code == 0, result.output
    assert "mode=select-grad-4" in result.output
    assert "mode=select-random-4" in result.output
    assert not ExperimentRunner(small_config, out).teacher_path.exists()


@pytest.mark.unit
def test_select_rejects_missing_pool(config_file, tmp_path):
    result = CliRunner().invoke(
        cli, ["select", "-c", str(config_file), "--pool", str(tmp_path / "absent.sadd")]
    )
    assert result.exit_code != 0
    assert "absent.sadd" in result.output
