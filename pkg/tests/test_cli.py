import json
import os

import pytest
import yaml

from dhglm.cli import main, run_fit
from dhglm.presets import PRESETS
from dhglm.report import COMPARISON_COLUMNS, SUMMARY_COLUMNS

SMALL = {"amis": {"n_initial": 200, "n_stages": 2, "n_per_stage": 100},
         "mcmc": {"burn_in": 200, "iterations": 1000, "thin": 5}}


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "small.yaml"
    p.write_text(yaml.safe_dump(SMALL))
    return p


@pytest.fixture(scope="module")
def poisson_run(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("run") / "nested" / "poisson"
    code = main(["fit", "--preset", "poisson-sim", "--method", "both", "--seed", "2", "--out", str(out),
                 "--config", str(small_config)])
    assert code == 0
    return out


def _header(path):
    return path.read_text().splitlines()[0]


def test_missing_output_directory_is_created(poisson_run):
    assert poisson_run.is_dir()


def test_golden_headers(poisson_run):
    for m in ("amis", "mcmc"):
        assert _header(poisson_run / f"summary_{m}.csv") == ",".join(SUMMARY_COLUMNS)
        assert _header(poisson_run / f"marginals_{m}" / "beta1.csv") == "x,density"
    assert _header(poisson_run / "comparison.csv") == ",".join(COMPARISON_COLUMNS)
    assert _header(poisson_run / "ess_log.csv") == "stage,n,n_total,ess,failed_fits,log_ml_at_mean"
    assert _header(poisson_run / "diagnostics" / "gamma0.csv") == "p,cumulative_weight"
    assert _header(poisson_run / "ensemble.csv") == "stage,gamma0,gamma1,log_target,log_weight"
    assert _header(poisson_run / "mcmc_draws.csv") == "beta0,beta1,gamma0,gamma1"


def test_summary_rows_and_run_summary(poisson_run):
    rows = (poisson_run / "summary_amis.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0] for r in rows] == ["beta0", "beta1", "gamma0", "gamma1"]
    summary = json.loads((poisson_run / "run_summary.json").read_text())
    assert summary["seed"] == 2 and summary["preset"] == "poisson-sim"
    assert len(summary["amis"]["stage_ess"]) == 3
    assert set(summary["timings"]) == {"setup", "amis", "mcmc"}
    assert (poisson_run / "ess_log.csv").read_text().count("\n") == 4


def test_rerun_is_bit_identical(poisson_run, tmp_path, small_config):
    out = tmp_path / "again"
    assert main(["fit", "--preset", "poisson-sim", "--method", "both", "--seed", "2", "--out", str(out),
                 "--config", str(small_config)]) == 0
    first = sorted(p.relative_to(poisson_run) for p in poisson_run.rglob("*") if p.is_file())
    second = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
    assert first == second
    for rel in first:
        a, b = (poisson_run / rel).read_bytes(), (out / rel).read_bytes()
        if rel.name == "run_summary.json":
            ja, jb = json.loads(a), json.loads(b)
            ja.pop("timings")
            jb.pop("timings")
            assert ja == jb
        else:
            assert a == b, rel


def test_unwritable_output_is_an_error(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = main(["fit", "--preset", "poisson-sim", "--out", str(blocker / "sub")])
    assert code == 2
    assert "cannot write to output directory" in capsys.readouterr().err


def test_unknown_preset_exit_code(tmp_path, capsys):
    assert main(["fit", "--preset", "nope", "--out", str(tmp_path)]) == 2
    assert "unknown preset 'nope'" in capsys.readouterr().err


def test_list_presets(capsys):
    assert main(["list-presets"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [l.split()[0] for l in lines] == list(PRESETS)


def test_simulate_writes_dataset_and_recipe(tmp_path):
    assert main(["simulate", "--preset", "negbin-sim", "--seed", "3", "--out", str(tmp_path)]) == 0
    assert _header(tmp_path / "dataset.csv") == "y,x,z"
    meta = yaml.safe_load((tmp_path / "recipe.yaml").read_text())
    assert meta["provenance"]["recipe"]["n"] == 125
    assert meta["provenance"]["recipe"]["seed"] == 3


def test_compare_exit_codes(poisson_run, tmp_path, capsys):
    a = poisson_run / "summary_amis.csv"
    assert main(["compare", str(a), str(a), "--out", str(tmp_path)]) == 0
    assert _header(tmp_path / "comparison.csv") == ",".join(COMPARISON_COLUMNS)
    lines = a.read_text().splitlines()
    cells = lines[1].split(",")
    cells[2] = str(float(cells[2]) + 1.0)
    b = tmp_path / "shifted.csv"
    b.write_text("\n".join([lines[0], ",".join(cells), *lines[2:]]) + "\n")
    assert main(["compare", str(a), str(b)]) == 1
    assert "FAIL" in capsys.readouterr().out
    c = tmp_path / "short.csv"
    c.write_text("\n".join(lines[:-1]) + "\n")
    assert main(["compare", str(a), str(c)]) == 2


def test_diagnose_rewrites_curves(poisson_run, capsys):
    for p in (poisson_run / "diagnostics").iterdir():
        p.unlink()
    assert main(["diagnose", "--run", str(poisson_run)]) == 0
    out = capsys.readouterr().out
    assert "stage 2" in out
    assert (poisson_run / "diagnostics" / "gamma1.csv").exists()


def test_diagnose_without_ensemble(tmp_path, capsys):
    assert main(["diagnose", "--run", str(tmp_path)]) == 2


def test_low_ess_is_flagged(tmp_path):
    ov = {"amis": {"n_initial": 100, "n_stages": 1, "n_per_stage": 100}}
    summary, _ = run_fit("gaussian-sim-scenario-3", "amis", "desk", 0, 1, tmp_path, ov)
    if summary["amis"]["ess"] < 100:
        assert any("below 100" in f for f in summary["flags"])
    else:
        assert not summary["flags"]


def test_workers_environment_default(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("DHGLM_WORKERS", "notanumber")
    assert main(["fit", "--preset", "poisson-sim", "--method", "amis", "--out", str(tmp_path),
                 "--config", str(small_config)]) == 2


def test_workers_do_not_change_results(tmp_path, small_config):
    ov = yaml.safe_load(small_config.read_text())
    _, one = run_fit("negbin-sim", "amis", "desk", 1, 1, tmp_path / "a", ov)
    _, two = run_fit("negbin-sim", "amis", "desk", 1, 2, tmp_path / "b", ov)
    assert (tmp_path / "a" / "ensemble.csv").read_bytes() == (tmp_path / "b" / "ensemble.csv").read_bytes()
    assert one == two
