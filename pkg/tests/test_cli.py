import json

import pytest
from click.testing import CliRunner

from subdomain_trisolve.cli import main
from subdomain_trisolve.report import read_residuals

TRIDIAGONAL = (
    "%%MatrixMarket matrix coordinate real general\n"
    "8 8 22\n"
    + "".join(f"{i} {i} 2.0\n" for i in range(1, 9))
    + "".join(f"{i} {i + 1} -1.0\n{i + 1} {i} -1.0\n" for i in range(1, 8))
)


@pytest.fixture
def runner():
    return CliRunner()


@pytest.mark.parametrize(
    "args, expected",
    [
        (["--gen", "laplacian1"], "laplacian1: nnz 131235840"),
        (["--gen", "laplacian2"], "laplacian2: nnz 262766592"),
        (["--gen", "laplacian1", "--layout", "scalar"], "laplacian1: nnz 14581760"),
        (["--gen", "4,4,4"], "laplacian_4x4x4: nnz 352"),
    ],
)
def test_gen_count_only(runner, args, expected):
    result = runner.invoke(main, ["gen", *args, "--count-only"])
    assert result.exit_code == 0, result.output
    assert expected in result.output


def test_gen_writes_matrix(runner, tmp_path):
    path = tmp_path / "lap.mtx"
    result = runner.invoke(main, ["gen", "--gen", "3,2,2", "-o", str(path)])
    assert result.exit_code == 0, result.output
    assert "12 rows, 52 nonzeros" in result.output
    assert path.read_text().startswith("%%MatrixMarket")


@pytest.mark.parametrize(
    "gen, expected",
    [
        ("laplacian1", "nnz 131235840 -> 122683392, dropped 8552448 (6.52%)"),
        ("laplacian2", "nnz 262766592 -> 245366784, dropped 17399808 (6.62%)"),
    ],
)
def test_decompose_count_only(runner, tmp_path, gen, expected):
    report = tmp_path / "report.json"
    result = runner.invoke(
        main, ["decompose", "--gen", gen, "--count-only", "--report", str(report)]
    )
    assert result.exit_code == 0, result.output
    assert expected in result.output
    data = json.loads(report.read_text())
    assert data["decomposition"]["nnz_before"] == data["matrix"]["nnz"]


def test_decompose_graph_partition(runner, tmp_path):
    matrix = tmp_path / "tridiagonal.mtx"
    matrix.write_text(TRIDIAGONAL)
    report = tmp_path / "report.json"
    result = runner.invoke(
        main,
        [
            "decompose",
            "--input",
            str(matrix),
            "--part-size",
            "2",
            "--workers",
            "1",
            "--report",
            str(report),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "nnz 22 -> 16, dropped 6 (27.27%) in 4 subdomains of 2 rows" in result.output
    assert "levels: max 2" in result.output
    data = json.loads(report.read_text())
    assert data["decomposition"]["nnz_dropped"] == 6
    assert data["schedule"]["n_subdomains"] == 4


def test_labels_round_trip_between_decompose_and_solve(runner, tmp_path):
    matrix = tmp_path / "tridiagonal.mtx"
    matrix.write_text(TRIDIAGONAL)
    labels = tmp_path / "labels.txt"
    first = tmp_path / "decompose.json"
    second = tmp_path / "solve.json"
    result = runner.invoke(
        main,
        [
            "decompose",
            "--input",
            str(matrix),
            "--part-size",
            "2",
            "--workers",
            "1",
            "--labels-out",
            str(labels),
            "--report",
            str(first),
        ],
    )
    assert result.exit_code == 0, result.output
    assert len(labels.read_text().split()) == 8
    result = runner.invoke(
        main,
        [
            "solve",
            "--input",
            str(matrix),
            "--labels",
            str(labels),
            "--workers",
            "1",
            "--report",
            str(second),
        ],
    )
    assert result.exit_code == 0, result.output
    before = json.loads(first.read_text())["decomposition"]
    after = json.loads(second.read_text())["decomposition"]
    assert after["nnz_dropped"] == before["nnz_dropped"] == 6
    assert after["n_subdomains"] == 4


def test_solve_writes_report_and_residuals(runner, tmp_path):
    report = tmp_path / "report.json"
    residuals = tmp_path / "residuals.csv"
    result = runner.invoke(
        main,
        [
            "solve",
            "--gen",
            "4,4,4",
            "--tile",
            "2,2,2",
            "--workers",
            "2",
            "--report",
            str(report),
            "--residuals",
            str(residuals),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "laplacian_4x4x4: converged in" in result.output
    assert "(ildu0_fused, level_vc)" in result.output
    data = json.loads(report.read_text())
    assert data["solver"]["converged"] is True
    assert data["decomposition"]["n_subdomains"] == 8
    history = read_residuals(residuals)
    assert len(history) == data["solver"]["iterations"] + 1
    assert history[-1] == data["solver"]["final_residual"]


def test_solve_reads_environment(runner, tmp_path, monkeypatch):
    report = tmp_path / "report.json"
    monkeypatch.setenv("SUBDOMAIN_TRISOLVE_STRATEGY", "level_ec")
    monkeypatch.setenv("SUBDOMAIN_TRISOLVE_WORKERS", "1")
    result = runner.invoke(
        main, ["solve", "--gen", "4,4,2", "--tile", "2,2,2", "--report", str(report)]
    )
    assert result.exit_code == 0, result.output
    assert json.loads(report.read_text())["solver"]["strategy"] == "level_ec"


def test_config_file_failure_still_writes_report(runner, tmp_path):
    config = tmp_path / "config.toml"
    config.write_text(
        "[run]\n"
        "tile = [2, 2, 2]\n"
        "\n"
        "[trisolve]\n"
        "workers = 1\n"
        "\n"
        "[solver]\n"
        "max_iter = 1\n"
        "tol = 1e-14\n"
    )
    report = tmp_path / "report.json"
    result = runner.invoke(
        main,
        ["--config", str(config), "solve", "--gen", "4,4,4", "--report", str(report)],
    )
    assert result.exit_code == 1
    assert "Error:" in result.output
    data = json.loads(report.read_text())
    assert data["solver"]["converged"] is False
    assert data["solver"]["iterations"] == 1


def test_flags_override_config_file(runner, tmp_path):
    config = tmp_path / "config.toml"
    config.write_text('[trisolve]\nstrategy = "level_ec"\nworkers = 1\n')
    report = tmp_path / "report.json"
    result = runner.invoke(
        main,
        [
            "--config",
            str(config),
            "solve",
            "--gen",
            "4,4,2",
            "--tile",
            "2,2,2",
            "--precond",
            "ilu0",
            "--strategy",
            "syncfree",
            "--report",
            str(report),
        ],
    )
    assert result.exit_code == 0, result.output
    data = json.loads(report.read_text())
    assert data["solver"]["strategy"] == "syncfree"
    assert data["solver"]["precond"] == "ilu0"


@pytest.mark.parametrize(
    "args",
    [
        ["gen", "--gen", "4,4", "--count-only"],
        ["gen", "--gen", "4,4,4"],
        ["solve", "--gen", "4,4,4", "--input", "a.mtx"],
        ["solve", "--input", "absent.mtx", "--workers", "1"],
        ["decompose", "--gen", "4,4,4"],
        ["decompose", "--gen", "4,4,4", "--part-size", "8", "--count-only"],
        ["solve", "--gen", "4,4,4", "--tile", "2,2,2", "--labels", "labels.txt"],
        ["solve", "--gen", "4,4,4", "--labels", "absent.txt", "--workers", "1"],
        ["trisolve-bench", "--gen", "4,4,4", "--tile", "2,2,2", "--strategies", "fastest"],
    ],
    ids=[
        "bad-grid",
        "gen-without-output",
        "two-sources",
        "missing-file",
        "no-partitioner",
        "count-only-graph",
        "two-partitioners",
        "missing-labels",
        "unknown-strategy",
    ],
)
def test_package_errors_exit_with_one(runner, tmp_path, args):
    with runner.isolated_filesystem(temp_dir=tmp_path):
        result = runner.invoke(main, args)
    assert result.exit_code == 1
    assert "Error:" in result.output


def test_missing_config_file_exits_with_one(runner, tmp_path):
    result = runner.invoke(
        main, ["--config", str(tmp_path / "absent.toml"), "gen", "--gen", "2,2,2", "--count-only"]
    )
    assert result.exit_code == 1
    assert "Config file not found" in result.output


def test_unexpected_errors_exit_with_two(runner, monkeypatch):
    def broken_run_solve(run, pool):
        raise RuntimeError("boom")

    monkeypatch.setattr("subdomain_trisolve.cli.run_solve", broken_run_solve)
    result = runner.invoke(main, ["solve", "--gen", "2,2,2", "--workers", "1"])
    assert result.exit_code == 2
    assert "unexpected failure: boom" in result.output


def test_bad_tile_is_a_usage_error(runner):
    result = runner.invoke(main, ["solve", "--gen", "4,4,4", "--tile", "2,2"])
    assert result.exit_code == 2
    assert "not three positive integers" in result.output


@pytest.mark.parametrize(
    "command, labels",
    [
        ("trisolve-bench", ["reference:", "level_vc:"]),
        ("precond-bench", ["ilu0/reference:", "ildu0/level_vc:", "ildu0_fused/level_vc:"]),
    ],
)
def test_benches(runner, tmp_path, command, labels):
    report = tmp_path / "bench.json"
    result = runner.invoke(
        main,
        [
            command,
            "--gen",
            "4,4,4",
            "--tile",
            "2,2,2",
            "--workers",
            "2",
            "--strategies",
            "reference,level_vc",
            "--report",
            str(report),
        ],
    )
    assert result.exit_code == 0, result.output
    for label in labels:
        assert label in result.output
    entries = json.loads(report.read_text())["entries"]
    assert all(entry["max_deviation"] < 1e-12 for entry in entries)
    assert "ildu0_fused/reference:" not in result.output
