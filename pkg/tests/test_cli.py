import json
from pathlib import Path

from typer.testing import CliRunner

from msfem import __version__
from msfem.cell import load_cell_solution
from msfem.cli import app

runner = CliRunner()


def _config(tmp_path: Path, **overrides) -> str:
    data = {"coefficient": "identity", "epsilons": ["1/4", "1/8"], "coarse": [2, 4], "fine_ratio": "1/8"}
    data.update(overrides)
    path = tmp_path / "study.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def test_version_and_doctor() -> None:
    result = runner.invoke(app, ["version"])
    assert result.exit_code == 0
    assert __version__ in result.output
    assert runner.invoke(app, ["doctor"]).exit_code == 0


def test_cell_command_writes_solution(tmp_path: Path) -> None:
    out = tmp_path / "cell.json"
    result = runner.invoke(app, ["cell", "--coef", "layered:2,1", "--n", "8", "--out", str(out)])
    assert result.exit_code == 0
    assert load_cell_solution(str(out)).n_cell == 8
    assert runner.invoke(app, ["cell", "--n", "4"]).exit_code == 1


def test_solve_with_comparison(tmp_path: Path) -> None:
    out = tmp_path / "solve.json"
    args = ["solve", "--eps", "1/4", "--coarse", "2", "--fine-ratio", "1/8", "--coef", "identity", "--compare"]
    result = runner.invoke(app, args + ["--out", str(out)])
    assert result.exit_code == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert payload["problem"]["kind"] == "mixed"
    assert payload["errors"]["backends"] == ["msfem", "fine"]
    assert payload["errors"]["h1_semi"] > 0
    assert runner.invoke(app, args[:-1] + ["--backend", "coarse"]).exit_code == 1


def test_solve_keeps_fine_ratio_from_config(tmp_path: Path) -> None:
    config = _config(tmp_path, fine_ratio="1/8")
    args = ["solve", "--config", config, "--eps", "1/4", "--coarse", "2", "--backend", "fine"]
    out = tmp_path / "fine.json"
    assert runner.invoke(app, args + ["--out", str(out)]).exit_code == 0
    # 1 / (eps * 1/8) = 32 cells per side
    assert json.loads(out.read_text(encoding="utf-8"))["result"]["vertices"] == 33 * 33

    assert runner.invoke(app, args + ["--fine-ratio", "1/16", "--out", str(out)]).exit_code == 0
    assert json.loads(out.read_text(encoding="utf-8"))["result"]["vertices"] == 65 * 65


def test_sweep_then_rates(tmp_path: Path) -> None:
    out_dir = tmp_path / "out"
    result = runner.invoke(app, ["sweep", "--config", _config(tmp_path), "--out-dir", str(out_dir)])
    assert result.exit_code == 0
    assert (out_dir / "rows.csv").exists()
    summary = json.loads((out_dir / "summary.json").read_text(encoding="utf-8"))
    assert summary["rows"] == 24
    assert summary["failures"] == []
    assert "cache_dir" not in summary["config"]
    assert summary["cell"]["n_cell"] == 8

    fits = tmp_path / "fits.json"
    result = runner.invoke(app, ["rates", "--in", str(out_dir / "rows.csv"), "--out", str(fits)])
    assert result.exit_code == 0
    assert json.loads(fits.read_text(encoding="utf-8"))["rows"] == 24
    assert runner.invoke(app, ["rates", "--in", str(tmp_path / "missing.csv")]).exit_code == 1


def test_sweep_with_failures_exits_nonzero(tmp_path: Path) -> None:
    config = _config(
        tmp_path,
        problem="hemivariational",
        beta={"kind": "linear", "scale": 50},
        epsilons=["1/4"],
        coarse=[2],
    )
    out_dir = tmp_path / "out"
    result = runner.invoke(app, ["sweep", "--config", config, "--out-dir", str(out_dir)])
    assert result.exit_code == 2
    summary = json.loads((out_dir / "summary.json").read_text(encoding="utf-8"))
    assert len(summary["failures"]) == 4


def test_bad_config_exits_with_one(tmp_path: Path) -> None:
    config = _config(tmp_path, fine_ratio="1/2")
    assert runner.invoke(app, ["sweep", "--config", config, "--out-dir", str(tmp_path / "o")]).exit_code == 1


def test_lemma_command(tmp_path: Path) -> None:
    out = tmp_path / "lemma.json"
    args = ["lemma", "--coef", "identity", "--eps-list", "1/16,1/32", "--points-per-epsilon", "4"]
    result = runner.invoke(app, args + ["--out", str(out)])
    assert result.exit_code == 0
    payload = json.loads(out.read_text(encoding="utf-8"))
    assert payload["fit"] is None
    assert payload["coefficient"] == "identity"
    assert runner.invoke(app, ["lemma", "--eps-list", "1/8"]).exit_code == 1
