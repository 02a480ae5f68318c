import json
import math

import numpy as np
import pytest

from frontier_mm import cli
from frontier_mm.dist import ScaledBeta
from frontier_mm.panel import PanelDataset, write_panel_csv
from frontier_mm.sim import SimDesign, simulate_panel


def run(tmp_path, *argv):
    out = tmp_path / "out"
    code = cli.main([*argv, "--out", str(out), "--jobs", "1"])
    return code, out


def load(path):
    return json.loads(path.read_text())


@pytest.fixture
def panel_csv(tmp_path):
    # flat frontier g = 5, one input that does not move it
    d = SimDesign(a=0.5, b=2, n=60, T=6)
    sp = simulate_panel(d, np.random.default_rng(70))
    x = np.random.default_rng(71).uniform(0, 1, sp.y.size)
    ids = np.repeat([f"f{i:03d}" for i in range(d.n)], d.T)
    data = PanelDataset.from_arrays(ids, x, sp.y.ravel(), periods=np.tile(np.arange(1, d.T + 1), d.n))
    path = tmp_path / "panel.csv"
    write_panel_csv(data, path)
    return path


# ---------------------------------------------------------------- bound / feasibility / fit-dist

def test_bound_flags(tmp_path):
    code, out = run(tmp_path, "bound", "--mu2", "1", "--mu3", "0")
    assert code == 0
    assert load(out / "bound_report.json")["lb_skew"] == 1.0
    assert load(out / "config_echo.json")["command"] == "bound"


def test_bound_exponential_moments(tmp_path):
    code, out = run(tmp_path, "bound", "--mu2", "1", "--mu3", "2", "--mu4", "9")
    assert code == 0
    assert load(out / "bound_report.json")["lb_skew"] == pytest.approx(math.sqrt(2) - 1, rel=1e-15)


def test_bound_rejects_nonpositive_variance(tmp_path, capsys):
    code, _ = run(tmp_path, "bound", "--mu2", "-1", "--mu3", "0")
    assert code == 2
    assert "bounds" in capsys.readouterr().err


def test_bound_from_moments_file(tmp_path):
    f = tmp_path / "m.json"
    f.write_text(json.dumps({"mu2": 4.0, "mu3": 0.0}))
    code, out = run(tmp_path, "bound", "--moments", str(f))
    assert code == 0 and load(out / "bound_report.json")["lb_skew"] == 2.0


def test_check_feasibility(tmp_path):
    code, out = run(tmp_path, "check-feasibility", "--raw", "1,2,6,24,120")
    assert code == 0 and load(out / "feasibility.json")["feasible"] is True
    code, out = run(tmp_path, "check-feasibility", "--central", "0,1,0")
    assert code == 0 and load(out / "feasibility.json")["feasible"] is False
    assert run(tmp_path, "check-feasibility", "--raw", "1,x")[0] == 2
    assert run(tmp_path, "check-feasibility")[0] == 2


def test_fit_dist_recovers_beta(tmp_path):
    p = ScaledBeta(2, 2, 4)
    mu = [p.central_moment(k) for k in (2, 3, 4)]
    code, out = run(tmp_path, "fit-dist", "--mu2", repr(mu[0]), "--mu3", repr(mu[1]), "--mu4", repr(mu[2]),
                    "--n-eff", "250")
    assert code == 0
    r = load(out / "fit_result.json")
    assert r["implied_mean"] == pytest.approx(2.0, rel=1e-6)
    np.testing.assert_allclose(r["model_moments"], mu, rtol=1e-5, atol=1e-9)


# ---------------------------------------------------------------- config resolution

def test_flags_override_file_override_defaults(tmp_path):
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps({"seed": 4, "fit": {"m0": 2, "c": 0.5}}))
    args = cli.build_parser().parse_args(["fit-dist", "--config", str(f), "--c", "2", "--mu2", "1", "--mu3", "0",
                                          "--mu4", "3", "--n-eff", "10"])
    cfg = cli.resolve_config(args)
    assert cfg["seed"] == 4 and cfg["fit"]["m0"] == 2 and cfg["fit"]["c"] == 2.0
    assert cfg["fit"]["family"] == "scaled_beta"  # default survives


def test_seed_env_fallback(tmp_path, monkeypatch):
    parse = lambda *a: cli.build_parser().parse_args(["bound", "--mu2", "1", "--mu3", "0", *a])
    monkeypatch.setenv(cli.SEED_ENV, "17")
    assert cli.resolve_config(parse())["seed"] == 17
    assert cli.resolve_config(parse("--seed", "3"))["seed"] == 3
    monkeypatch.setenv(cli.SEED_ENV, "abc")
    with pytest.raises(cli.InputError):
        cli.resolve_config(parse())
    monkeypatch.delenv(cli.SEED_ENV)
    assert cli.resolve_config(parse())["seed"] == 0


def test_bad_config_file(tmp_path):
    f = tmp_path / "cfg.json"
    f.write_text("{not json")
    assert run(tmp_path, "bound", "--config", str(f), "--mu2", "1", "--mu3", "0")[0] == 2


# ---------------------------------------------------------------- estimate

def test_estimate_outputs(tmp_path, panel_csv):
    code, out = run(tmp_path, "estimate", "--input", str(panel_csv), "--c", "1", "--seed", "2")
    assert code in (0, 1)
    mom, fits = load(out / "moments.json"), load(out / "fits.json")
    assert mom["pooled"]["mu2_u"] > 0
    assert len(fits["firms"]) == 60 and all("firm" in r for r in fits["firms"])
    rows = (out / "frontier.csv").read_text().splitlines()
    assert rows[0].startswith("firm,period,x,y,") and len(rows) == 1 + 360
    g = np.array([float(r.split(",")[-2]) for r in rows[1:]])
    cols = np.array([float(r.split(",")[-1]) for r in rows[1:]])
    assert abs(np.nanmean(g) - 5) < 0.5 and abs(cols.mean() - 5) < 0.5
    echo = load(out / "config_echo.json")
    assert echo["config"]["seed"] == 2 and echo["input"] == str(panel_csv)


def test_estimate_intercept_only_is_pooled(tmp_path, panel_csv):
    code, out = run(tmp_path, "estimate", "--input", str(panel_csv), "--degree", "0", "--ridge", "0")
    assert code in (0, 1)
    mom = load(out / "moments.json")
    assert mom["mean_model"]["dim"] == 1
    rows = (out / "frontier.csv").read_text().splitlines()[1:]
    cols = {r.split(",")[-1] for r in rows}
    assert len(cols) == 1  # constant frontier from pooled moments


def test_estimate_malformed_csv(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("firm,period,y,x\na,1,1.0,oops\n")
    code, _ = run(tmp_path, "estimate", "--input", str(bad))
    assert code == 2
    assert "row 2" in capsys.readouterr().err
    missing = tmp_path / "nope.csv"
    assert run(tmp_path, "estimate", "--input", str(missing))[0] == 2


def test_estimate_reproducible(tmp_path, panel_csv):
    a = cli.main(["estimate", "--input", str(panel_csv), "--out", str(tmp_path / "a"), "--jobs", "1"])
    b = cli.main(["estimate", "--input", str(panel_csv), "--out", str(tmp_path / "b"), "--jobs", "1"])
    assert a == b
    for name in ("moments.json", "fits.json", "frontier.csv", "config_echo.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


# ---------------------------------------------------------------- simulate

def test_simulate_twice_identical(tmp_path):
    design = tmp_path / "d.json"
    design.write_text(json.dumps({"a": 2, "b": 4, "n": 40}))
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}"
        code = cli.main(["simulate", "--design", str(design), "--reps", "1", "--seed", "8", "--out", str(out),
                         "--jobs", "1"])
        assert code in (0, 1)
        outs.append(out)
    for name in ("metrics.csv", "grid.csv", "config_echo.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    echo = load(outs[0] / "config_echo.json")
    assert echo["resolved"]["designs"][0]["seed"] == 8 and echo["resolved"]["designs"][0]["reps"] == 1
    assert "jobs" not in json.dumps(echo)
    lines = (outs[0] / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("n,estimator,region") and len(lines) == 3


def test_simulate_bad_design(tmp_path):
    design = tmp_path / "d.json"
    design.write_text(json.dumps({"a": -1}))
    assert run(tmp_path, "simulate", "--design", str(design), "--reps", "1")[0] == 2
