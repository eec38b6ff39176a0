import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiltedep import config as config_mod
from tiltedep.cli import main, read_summary
from tiltedep.config import ConfigError, ExperimentConfig, load, parse, render


# ------------------------------------------------------------------- config

configs = st.builds(
    ExperimentConfig,
    kind=st.sampled_from(["hlogit", "conjugate"]),
    J=st.integers(1, 100),
    N_j=st.integers(1, 100),
    D=st.integers(1, 20),
    tau=st.floats(0, 10, allow_nan=False),
    seed=st.integers(0, 2**31),
    groups_per_shard=st.integers(1, 5),
    parameterization=st.sampled_from(["centered", "noncentered", "integrated"]),
    eta=st.floats(0.01, 1.0),
    delta0=st.floats(0.01, 1.0),
    max_iters=st.integers(0, 100),
    conv_tol=st.floats(1e-12, 1.0),
    init=st.sampled_from(["zero", "broad", "broad_per_site"]),
    schedule=st.sampled_from(["serial", "parallel"]),
    backend=st.sampled_from(["laplace", "mcmc"]),
    proposal_scale=st.one_of(st.none(), st.floats(0.01, 5.0)),
    sampler_seed=st.one_of(st.none(), st.integers(0, 1000)),
    reuse=st.booleans(),
    threshold_frac=st.floats(0.01, 1.0),
    out_dir=st.text("abcxyz_/", min_size=1, max_size=10),
)


@settings(max_examples=100, deadline=None)
@given(configs)
def test_config_round_trip(cfg):
    assert parse(render(cfg)) == cfg


def test_config_overrides_and_env():
    text = render(ExperimentConfig(seed=3, J=7))
    cfg = parse(text, {"J": "9", "delta0": "0.5"})
    assert cfg.J == 9 and cfg.delta0 == 0.5 and cfg.seed == 3
    assert load(None, {"seed": "4"}, env={"EP_SEED": "11"}).seed == 11
    assert load(None, {"seed": "4"}, env={}).seed == 4


@pytest.mark.parametrize("text,overrides", [
    ("[model]\nJ = 0\n", {}),
    ("[model]\nbogus = 1\n", {}),
    ("[nowhere]\nJ = 1\n", {}),
    ("[ep]\nJ = 1\n", {}),
    ("", {"eta": "abc"}),
    ("", {"reuse": "maybe"}),
    ("", {"backend": "hmc"}),
    ("", {"delta0": "0"}),
    ("", {"parameterization": "other"}),
])
def test_config_rejects_invalid(text, overrides):
    with pytest.raises(ConfigError):
        parse(text, overrides)


# --------------------------------------------------------------------- CLI


def test_simulate_smoke_is_byte_identical(tmp_path):
    args = ["simulate", "--out", str(tmp_path / "a"), "--J", "2", "--N_j", "3", "--D", "1"]
    assert main(args) == 0
    data = (tmp_path / "a" / "data.csv").read_bytes()
    truth = (tmp_path / "a" / "truth.csv").read_bytes()
    assert data.decode().splitlines()[0] == "group,y,x1" and len(data.decode().splitlines()) == 7
    assert main(args) == 0
    assert (tmp_path / "a" / "data.csv").read_bytes() == data
    assert (tmp_path / "a" / "truth.csv").read_bytes() == truth


def test_simulate_seed_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("EP_SEED", "5")
    main(["simulate", "--out", str(tmp_path / "a"), "--J", "2", "--N_j", "3", "--D", "1"])
    monkeypatch.setenv("EP_SEED", "6")
    main(["simulate", "--out", str(tmp_path / "b"), "--J", "2", "--N_j", "3", "--D", "1"])
    assert (tmp_path / "a" / "data.csv").read_bytes() != (tmp_path / "b" / "data.csv").read_bytes()


def test_flags_override_config_file(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(render(ExperimentConfig(J=5, N_j=2, D=1)))
    main(["simulate", "--config", str(ini), "--out", str(tmp_path / "o"), "--J=3"])
    rows = (tmp_path / "o" / "data.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 2


def _trace_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_run_conjugate_converges_quickly(tmp_path):
    out = tmp_path / "r"
    code = main(["run", "--out", str(out), "--kind", "conjugate", "--backend", "laplace", "--workers", "1"])
    assert code == 0
    rows = _trace_rows(out / "trace.csv")
    assert rows[0] == ["iter", "site", "dr_inf", "dQ_inf", "delta_used", "pd_rejects", "logml", "ms"]
    assert max(int(r[0]) for r in rows[1:]) <= 2
    names, mean, sd = read_summary(out / "summary.csv")
    assert names == ["theta1", "theta2", "theta3", "theta4"] and np.all(sd > 0)
    assert (out / "report.txt").exists() and not (out / "coverage.csv").exists()


def test_run_zero_iterations_exits_two(tmp_path):
    out = tmp_path / "r"
    code = main(["run", "--out", str(out), "--kind", "conjugate", "--backend", "laplace", "--max_iters", "0"])
    assert code == 2
    assert len(_trace_rows(out / "trace.csv")) == 1


def test_run_dimension_mismatch_exits_one(tmp_path, capsys):
    out = str(tmp_path / "r")
    main(["simulate", "--out", out, "--J", "2", "--N_j", "3", "--D", "2"])
    assert main(["run", "--out", out, "--J", "2", "--N_j", "3", "--D", "3", "--backend", "laplace"]) == 1
    assert "D=2" in capsys.readouterr().err


def test_bad_flag_exits_one(tmp_path):
    assert main(["simulate", "--out", str(tmp_path), "--nonsense", "1"]) == 1
    assert main(["simulate", "--out", str(tmp_path), "--J"]) == 1


def _pipeline(tmp_path, name, workers, extra):
    out = str(tmp_path / name)
    if "conjugate" not in extra:
        assert main(["simulate", "--out", out] + extra) == 0
    code = main(["run", "--out", out, "--schedule", "parallel", "--workers", str(workers)] + extra)
    assert code in (0, 2)
    return (tmp_path / name / "summary.csv").read_bytes()


@pytest.mark.parametrize("extra", [
    ["--J", "6", "--N_j", "30", "--D", "2", "--seed", "3", "--backend", "mcmc", "--n_draws", "100",
     "--max_iters", "4"],
    ["--kind", "conjugate", "--K", "6", "--backend", "laplace"],
])
def test_pipeline_determinism_across_runs_and_workers(tmp_path, extra):
    a = _pipeline(tmp_path, "a", 1, extra)
    b = _pipeline(tmp_path, "b", 1, extra)
    c = _pipeline(tmp_path, "c", 4, extra)
    assert a == b == c


def test_report_with_and_without_truth(tmp_path, capsys):
    out = tmp_path / "r"
    base = ["--J", "8", "--N_j", "40", "--D", "2", "--seed", "3"]
    main(["simulate", "--out", str(out)] + base)
    main(["run", "--out", str(out), "--backend", "laplace", "--max_iters", "60", "--workers", "1"] + base)
    assert (out / "coverage.csv").read_text().splitlines()[0] == "level,fraction"
    capsys.readouterr()
    args = ["report", "--trace", str(out / "trace.csv"), "--summary", str(out / "summary.csv")]
    assert main(args) == 0
    plain = capsys.readouterr().out
    assert "coverage" not in plain and "beta1" in plain and "log_tau" in plain
    assert main(args + ["--truth", str(out / "truth.csv")]) == 0
    assert "1 sd:" in capsys.readouterr().out


def test_report_names_malformed_trace_line(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    trace.write_text("iter,site,dr_inf,dQ_inf,delta_used,pd_rejects,logml,ms\n1,0,0.1,0.1,1,0,nan,1.0\n1,x\n")
    summary = tmp_path / "s.csv"
    summary.write_text("param,mean,sd\nbeta1,0.5,0.1\n")
    assert main(["report", "--trace", str(trace), "--summary", str(summary)]) == 1
    assert "line 3" in capsys.readouterr().err


def test_report_names_malformed_summary_line(tmp_path, capsys):
    trace = tmp_path / "t.csv"
    trace.write_text("iter,site,dr_inf,dQ_inf,delta_used,pd_rejects,logml,ms\n")
    summary = tmp_path / "s.csv"
    summary.write_text("param,mean,sd\nbeta1,0.5,0.1\nbeta2,oops\n")
    assert main(["report", "--trace", str(trace), "--summary", str(summary)]) == 1
    assert "line 3" in capsys.readouterr().err


def test_module_sections_cover_all_keys():
    keys = sorted(k for ks in config_mod.SECTIONS.values() for k in ks)
    assert keys == sorted(f for f in ExperimentConfig.__dataclass_fields__)
