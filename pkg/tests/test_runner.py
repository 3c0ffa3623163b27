import json
import os

import numpy as np
import pytest
import yaml

from becphase import cli, runner, stochastic
from becphase.errors import ConfigurationError, NumericError

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")

SMALL = {
    "name": "small",
    "n_modes": 3,
    "g_strength": 0.2,
    "protocol": {"stages": [{"duration": 0.2}]},
    "initial_state": {"condensate": [1.5, 0.5]},
    "dt": 0.005,
    "observation_times": [0.0, 0.1, 0.2],
    "n_trajectories": 120,
    "seed": 7,
    "block_size": 40,
    "observables": {"g1_diagonal": True, "g1_pairs": [[0.0, 0.5]], "g2_pairs": [[0.0, 0.0]],
                    "one_body": True, "occupations": True, "imbalance": True,
                    "monomials": ["a0", "a2+ a2"], "visibility_window": [-1.0, 1.0]},
}


def small(tmp_path, **kw):
    raw = {**SMALL, "output": str(tmp_path / "out"), **kw}
    return runner.build_config(raw)


def write_yaml(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def test_defaults_filled():
    cfg = runner.build_config({"observation_times": [0.0, 1.0]})
    assert cfg.n_modes == 12 and cfg.dt == 1e-3
    assert cfg.deterministic_merge and cfg.energy_reference == "center"
    assert cfg.protocol.span == 1.0


def test_every_violation_reported():
    with pytest.raises(ConfigurationError) as exc:
        runner.build_config({"temprature": 3, "n_trajectories": 0, "dt": -1,
                             "observation_times": [0.0, 1.0]})
    text = str(exc.value)
    assert "temprature" in text
    assert "n_trajectories" in text
    assert "dt" in text


def test_schedule_and_guard_errors():
    with pytest.raises(ConfigurationError):
        runner.build_config({"observation_times": [0.0, 0.15], "dt": 0.1})
    with pytest.raises(ConfigurationError):
        runner.build_config({"observation_times": [0.0, 1.0], "n_modes": 100})
    with pytest.raises(ConfigurationError):
        runner.build_config({"observation_times": [0.0, 1.0], "observables": {"g3": True}})
    with pytest.raises(ConfigurationError):
        runner.build_config({"observation_times": [0.0, 1.0], "energy_reference": "zero"})


def test_parse_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        runner.parse_config(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("a: [1, 2\n")
    with pytest.raises(ConfigurationError):
        runner.parse_config(str(bad))


def test_observation_time_range():
    cfg = runner.build_config({"observation_times": {"start": 0, "stop": 1, "step": 0.25}})
    assert cfg.observation_times == (0.0, 0.25, 0.5, 0.75, 1.0)


def test_hash_ignores_output_and_workers(tmp_path):
    a = small(tmp_path)
    b = a.with_overrides(output="elsewhere", workers=3, deterministic_merge=False)
    c = a.with_overrides(seed=8)
    assert a.hash() == b.hash()
    assert a.hash() != c.hash()


@pytest.mark.parametrize("name", ["g0_harmonic", "vacuum", "josephson", "hybrid_small",
                                  "interferometer"])
def test_shipped_configs_parse(name):
    cfg = runner.parse_config(os.path.join(CONFIGS, f"{name}.yaml"))
    assert cfg.name == name


def test_run_outputs_and_integrity(tmp_path):
    cfg = small(tmp_path, flags={"dump_trajectories": True, "dump_derivation": True})
    report, _, acc = runner.run_ensemble(cfg)
    assert report.exit_code == 0 and report.diverged == 0
    assert acc.count == 120
    h = cfg.hash()
    for name in report.files:
        path = os.path.join(cfg.output, name)
        assert os.path.exists(path), name
        if name.endswith(".bin"):
            *_, tag = stochastic.read_trajectory_dump(path, with_tag=True)
            assert tag == int(h, 16)
        else:
            assert h.encode() in open(path, "rb").read(), name
    rep = json.load(open(os.path.join(cfg.output, "report.json")))
    assert rep["config_hash"] == h
    res = json.load(open(os.path.join(cfg.output, "results.json")))
    assert res["factorization_residual"] < 1e-10
    assert set(res["summaries"]) >= {"visibility"}
    times, samples, seeds, div = stochastic.read_trajectory_dump(
        os.path.join(cfg.output, "trajectories.bin"))
    assert samples.shape == (120, 3, 6)
    assert seeds[0] == stochastic.trajectory_seed(7, 0)


def test_worker_count_byte_identity(tmp_path):
    outs = []
    for workers in (1, 2, 3):
        cfg = small(tmp_path, output=str(tmp_path / f"w{workers}"), workers=workers)
        runner.run_ensemble(cfg, with_figures=False)
        outs.append(cfg.output)
    names = [n for n in sorted(os.listdir(outs[0])) if n != "report.json"]
    assert "g1_pairs.csv" in names and "results.json" in names
    for n in names:
        ref = open(os.path.join(outs[0], n), "rb").read()
        for o in outs[1:]:
            assert open(os.path.join(o, n), "rb").read() == ref, n


def test_nondeterministic_merge_statistically_equal(tmp_path):
    a = small(tmp_path, output=str(tmp_path / "a"), workers=2)
    b = a.with_overrides(output=str(tmp_path / "b"), deterministic_merge=False)
    _, _, acc_a = runner.run_ensemble(a, with_figures=False)
    _, _, acc_b = runner.run_ensemble(b, with_figures=False)
    assert acc_a.count == acc_b.count
    assert np.allclose(acc_a.mean_pairs(0.2), acc_b.mean_pairs(0.2), rtol=1e-12, atol=1e-12)


def test_divergence_cap_zero(tmp_path):
    raw = {**SMALL, "divergence_factor": 0.0, "output": str(tmp_path / "div")}
    path = write_yaml(tmp_path, raw)
    assert cli.main(["run", path, "--no-figures"]) == 4
    rep = json.load(open(tmp_path / "div" / "report.json"))
    assert rep["diverged_fraction"] == 1.0 and rep["n_used"] == 0
    lines = open(tmp_path / "div" / "g1_diagonal.csv").read().splitlines()
    assert len(lines) == 2 and lines[0].startswith("#")


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    bad = write_yaml(tmp_path, {"temprature": 1}, "bad.yaml")
    assert cli.main(["run", bad]) == 2
    assert "temprature" in capsys.readouterr().err
    assert cli.main(["launch", bad]) == 2
    good = write_yaml(tmp_path, {**SMALL, "output": str(tmp_path / "cli")})
    assert cli.main(["run", good, "--trajectories", "40", "--seed", "3", "--workers", "2",
                     "--deterministic-merge=off", "--no-figures"]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["n_used"] == 40

    def boom(*a, **k):
        raise NumericError("norm drifted")
    monkeypatch.setattr(runner, "run_ensemble", boom)
    assert cli.main(["run", good]) == 3
    assert "error [run]" in capsys.readouterr().err


def test_derive_and_modes(tmp_path):
    cfg = small(tmp_path)
    path, payload = runner.run_derive(cfg)
    assert os.path.exists(path)
    assert payload["factorization_residual"] < 1e-10
    assert payload["config_hash"] == cfg.hash()
    files, setup = runner.run_modes(cfg)
    assert {"basis.json", "energies.csv", "modes.png"} <= set(files)
    rows = open(os.path.join(cfg.output, "energies.csv")).read().splitlines()
    assert len(rows) == 2 + cfg.n_modes


def test_oracle_caps(tmp_path):
    cfg = small(tmp_path, n_modes=6)
    with pytest.raises(ConfigurationError):
        runner.run_oracle_compare(cfg)
    cfg = small(tmp_path, initial_state={"condensate": [40.0, 40.0]}, n_modes=4)
    with pytest.raises(ConfigurationError):
        runner.check_oracle_caps(cfg)


def test_compare_small_instance(tmp_path):
    cfg = small(tmp_path, n_trajectories=2000, block_size=500)
    report = runner.run_oracle_compare(cfg, with_figures=False)
    assert report.results["comparison_fraction"] >= 0.95
    assert report.exit_code == 0
    lines = open(os.path.join(cfg.output, "comparison.csv")).read().splitlines()
    assert lines[0] == f"# config_hash={cfg.hash()}"
    assert lines[1] == "observable,t,stochastic,se,exact,z"
