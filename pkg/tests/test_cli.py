import json
import subprocess
import sys

import numpy as np
import pytest

from sdeinfer.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

SMALL = """\
[run]
benchmark = ou
master_seed = 1

[simulation]
pairs_m = 800
inner_dt = 0.01

[cde]
max_epochs = 5
hidden_widths = 8

[bo]
n_initial = 3
n_max = 2
acquisition_restarts = 4
gp_restarts = 1

[mcmc]
n_steps = 1500
burn_in = 300

[refine]
n_refine = 3
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    (base / "small.ini").write_text(SMALL)
    out = base / "run"
    assert main(["infer", "--config", str(base / "small.ini"), "--output", str(out)]) == EXIT_OK
    return out


def test_infer_prints_summary(run_dir, capsys):
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["master_seed"] == 1 and len(summary["refined"]["mean"]) == 1


def test_validate_config(tmp_path, capsys):
    good = tmp_path / "good.ini"
    good.write_text(SMALL)
    assert main(["validate-config", str(good)]) == EXIT_OK
    assert "ok" in capsys.readouterr().out
    bad = tmp_path / "bad.ini"
    bad.write_text(SMALL.replace("n_refine = 3", "n_refine = 3\nbogus = 1"))
    assert main(["validate-config", str(bad)]) == EXIT_CONFIG
    assert "[refine] bogus" in capsys.readouterr().err


def test_duplicate_seed_rejected(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["infer", "--benchmark", "ou", "--seed", "1", "--seed", "2"])
    assert err.value.code == EXIT_CONFIG


def test_simulate_writes_series(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text(SMALL)
    assert main(["simulate", "--config", str(cfg), "--seed", "4", "--output", str(tmp_path / "sim")]) == EXIT_OK
    obs = np.loadtxt(tmp_path / "sim" / "observations.csv", delimiter=",", skiprows=1, ndmin=2)
    assert obs.shape[0] == 100
    traj = np.loadtxt(tmp_path / "sim" / "trajectory.csv", delimiter=",", skiprows=1)
    assert traj.shape == (10001, 2)


@pytest.mark.parametrize("kind, phase, header", [
    ("posterior", "refined", "param,bin_lo,bin_hi,density"),
    ("posterior", "coarse", "param,bin_lo,bin_hi,density"),
    ("surrogate", "coarse", "lambda,mean,sd,lower,upper"),
    ("surrogate", "refined", "lambda,mean,sd,lower,upper"),
    ("transition-density", "refined", "z1,iakde,cde,analytic"),
])
def test_plotdata_headers(run_dir, tmp_path, kind, phase, header):
    out = tmp_path / "p.csv"
    rc = main(["plotdata", str(run_dir), "--kind", kind, "--phase", phase, "--grid-size", "20", "--bins", "10",
               "--out", str(out)])
    assert rc == EXIT_OK
    assert out.read_text().splitlines()[0] == header
    data = np.loadtxt(out, delimiter=",", skiprows=1, ndmin=2)
    assert np.all(np.isfinite(data))


def test_posterior_histogram_integrates_to_one(run_dir, tmp_path):
    out = tmp_path / "h.csv"
    main(["plotdata", str(run_dir), "--kind", "posterior", "--out", str(out)])
    d = np.loadtxt(out, delimiter=",", skiprows=1)
    assert np.sum((d[:, 2] - d[:, 1]) * d[:, 3]) == pytest.approx(1.0)


def test_plotdata_on_incomplete_run_is_runtime_error(tmp_path):
    assert main(["plotdata", str(tmp_path), "--kind", "posterior"]) == EXIT_RUNTIME


def test_missing_config_is_config_error(tmp_path):
    assert main(["infer", "--config", str(tmp_path / "nope.ini")]) == EXIT_CONFIG


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "sdeinfer.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "plotdata" in res.stdout
