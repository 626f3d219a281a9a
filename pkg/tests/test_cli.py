import json
import os

import numpy as np
import pytest

from coupled_opt import ReferenceSolution
from coupled_opt.cli import ConfigError, RunConfig, load_config_file, main, parse_config
from coupled_opt.metrics import read_trace

from conftest import FIXTURES

MINIMAL = {"seed": 1, "n": 20, "p": 5, "kappa": 100, "topology": "ring_plus", "rho": 0.001, "N": 1200}


def test_minimal_config():
    cfg = parse_config(MINIMAL)
    assert isinstance(cfg, RunConfig)
    assert (cfg.seed, cfg.n, cfg.p, cfg.kappa, cfg.topology, cfg.rho, cfg.N) == (1, 20, 5, 100.0, "ring_plus",
                                                                                  0.001, 1200)
    assert cfg.algo == "accelerated"


@pytest.mark.parametrize("patch, key", [
    ({"N": 0}, "N"),
    ({"rho": -1}, "rho"),
    ({"rho": "abc"}, "rho"),
    ({"n": "many"}, "n"),
    ({"N": 2.5}, "N"),
    ({"algo": "newton"}, "algo"),
    ({"colour": "red"}, "colour"),
    ({"debug": "yes"}, "debug"),
    ({"sweep_horizons": []}, "sweep_horizons"),
])
def test_rejections_name_key(patch, key):
    with pytest.raises(ConfigError) as exc:
        parse_config(MINIMAL | patch)
    assert exc.value.key == key
    assert key in str(exc.value)


def test_missing_source():
    with pytest.raises(ConfigError, match="seed"):
        parse_config({"N": 10})


def test_conflicting_sources():
    with pytest.raises(ConfigError, match="conflicting"):
        parse_config(MINIMAL | {"instance": "x.json"})


def test_flag_overrides_file():
    cfg = parse_config(MINIMAL, {"rho": "0.01", "N": None})
    assert cfg.rho == 0.01
    assert cfg.N == 1200


def test_aliases_and_lists():
    cfg = parse_config({"seed": 2, "horizon": 50, "sweep_horizons": "100,200,400", "rho": "auto"})
    assert cfg.N == 50 and cfg.sweep_horizons == [100, 200, 400] and cfg.rho == "auto"


def test_yaml_and_json_files(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 1\nN: 7\nrho: 0.1\n")
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "N": 7}))
    assert load_config_file(tmp_path / "c.yaml") == {"seed": 1, "N": 7, "rho": 0.1}
    assert load_config_file(tmp_path / "c.json")["N"] == 7
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="config"):
        load_config_file(tmp_path / "bad.json")


def test_main_reports_config_error(capsys):
    assert main(["run", "--seed", "1", "--horizon", "0"]) == 2
    assert "N" in capsys.readouterr().err


def tiny_args(out, *extra):
    return ["run", "--seed", "1", "--n", "3", "--p", "2", "--rho", "0.01", "--horizon", "40", "--workers", "1",
            "--reference", str(FIXTURES / "reference_seed1_n3p2.json"), "--out", str(out), *extra]


def test_run_writes_files(tmp_path):
    out = tmp_path / "a"
    assert main(tiny_args(out)) == 0
    assert {p.name for p in out.iterdir()} == {"trace.csv", "summary.json", "instance.json"}
    rows = read_trace(out / "trace.csv")
    assert len(rows) == 40 and rows[-1]["k"] == 40
    summary = json.loads((out / "summary.json").read_text())
    assert summary["version"]
    run = summary["runs"][0]
    assert run["rho"] == 0.01 and run["schedule"]["N"] == 40
    assert set(run["bounds"]) == {"eps_c", "eps_p_lower", "eps_p_upper", "xi", "inputs"}
    assert run["final"]["feas_residual"] == rows[-1]["feas_residual"]


def test_run_byte_identical(tmp_path):
    main(tiny_args(tmp_path / "a"))
    main(tiny_args(tmp_path / "b", "--workers", "3"))
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_run_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("COUPLED_OPT_OUT", str(tmp_path / "env"))
    args = tiny_args("x")
    i = args.index("--out")
    del args[i:i + 2]
    monkeypatch.chdir(tmp_path)
    assert main(args) == 0
    assert (tmp_path / "env" / "trace.csv").exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["env"]


def test_subgradient_worse_than_accelerated(tmp_path):
    fin = {}
    for algo in ("accelerated", "subgradient"):
        args = tiny_args(tmp_path / algo, "--algo", algo)
        args[args.index("--horizon") + 1] = "400"
        assert main(args) == 0
        fin[algo] = read_trace(tmp_path / algo / "trace.csv")[-1]["rel_primal_error"]
    assert fin["subgradient"] > fin["accelerated"]


def test_run_sweep_and_debug(tmp_path):
    out = tmp_path / "s"
    args = tiny_args(out, "--sweep-horizons", "20,40,80", "--debug")
    assert main(args) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [r["N"] for r in summary["runs"]] == [20, 40, 80]
    assert summary["feas_rate_slope"] is not None
    header = (out / "trace_N20.csv").read_text().splitlines()[0]
    assert header.endswith("inner_iterations,inner_residual")


def test_run_computes_reference_when_missing(tmp_path):
    out = tmp_path / "r"
    args = tiny_args(out)
    i = args.index("--reference")
    del args[i:i + 2]
    assert main(args) == 0
    assert json.loads((out / "summary.json").read_text())["reference_source"] == "computed"
    ref = ReferenceSolution.load(out / "reference.json")
    assert ref.f_star == pytest.approx(ReferenceSolution.load(FIXTURES / "reference_seed1_n3p2.json").f_star, abs=1e-9)


def test_reference_hand_instance(tmp_path, hand2):
    hand2.save(tmp_path / "hand.json")
    out = tmp_path / "ref"
    assert main(["reference", "--instance", str(tmp_path / "hand.json"), "--tol", "1e-10", "--out", str(out)]) == 0
    ref = ReferenceSolution.load(out / "reference.json")
    # f = x1^2 - 2 x1 + x2^2 - 4 x2 at (-0.5, 0.5)
    assert ref.f_star == pytest.approx(0.25 + 1 + 0.25 - 2, abs=1e-10)
    np.testing.assert_allclose(ref.x_star, [-0.5, 0.5], atol=1e-9)
    check = json.loads((out / "reference_check.json").read_text())
    assert check["abs_diff"] <= check["limit"]


def test_reference_idempotent_and_grid_checked(tmp_path):
    args = ["reference", "--seed", "1", "--n", "3", "--p", "2", "--tol", "1e-10"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "reference.json").read_bytes() == (tmp_path / "b" / "reference.json").read_bytes()
    check = json.loads((tmp_path / "a" / "reference_check.json").read_text())
    assert check["abs_diff"] <= 1e-9


def test_reference_disagreement_exit(tmp_path, monkeypatch):
    import coupled_opt.cli as cli
    monkeypatch.setattr(cli, "grid_reference", lambda inst, tol: (np.zeros(inst.n * inst.p), 1e3))
    assert main(["reference", "--seed", "1", "--n", "3", "--p", "2", "--out", str(tmp_path)]) == 3


def test_generate_and_load_instance(tmp_path):
    assert main(["generate", "--seed", "4", "--n", "3", "--p", "2", "--out", str(tmp_path / "g")]) == 0
    inst_path = tmp_path / "g" / "instance.json"
    args = ["run", "--instance", str(inst_path), "--rho", "0.1", "--horizon", "5", "--out", str(tmp_path / "h")]
    assert main(args) == 0
    # a loaded instance is not rewritten
    assert not (tmp_path / "h" / "instance.json").exists()


def test_topology_edge_file(tmp_path):
    (tmp_path / "edges.json").write_text(json.dumps({"n": 3, "edges": [[0, 1, 1.0], [1, 2, 2.0]]}))
    args = tiny_args(tmp_path / "o", "--topology", str(tmp_path / "edges.json"))
    assert main(args) == 0
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["network"]["norm_W"] > 3


def test_bad_topology_exit(tmp_path, capsys):
    assert main(tiny_args(tmp_path, "--topology", "star")) == 2
    assert "unknown topology" in capsys.readouterr().err


def test_tune_writes_table(tmp_path):
    args = ["tune", "--seed", "1", "--n", "3", "--p", "2", "--horizon", "30", "--rho-grid", "0.01,0.1",
            "--reference", str(FIXTURES / "reference_seed1_n3p2.json"), "--out", str(tmp_path)]
    assert main(args) == 0
    lines = (tmp_path / "tune.csv").read_text().splitlines()
    assert lines[0] == "rho,rel_primal_error,feas_residual,consensus_error" and len(lines) == 3
    assert json.loads((tmp_path / "tune.json").read_text())["best_rho_by_rel_error"] in (0.01, 0.1)
