import csv
import hashlib
import json

import pytest

from bilevel import checks
from bilevel.cli import ConfigError, RunConfig, main


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_config_roundtrip():
    cfg = RunConfig("meta", seed=3, out_dir="x", threads=2, deterministic=False)
    cfg.set("T_list", "3,5")
    cfg.set("lr", "0.1234567890123456789")
    cfg.set("modes", "full,classic")
    back = RunConfig.loads(cfg.dumps())
    assert back.to_dict() == cfg.to_dict()
    assert back.params["T_list"] == [3, 5] and back.params["modes"] == ["full", "classic"]


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[run]\nexperiment = check\nseed = 4\n[params]\nn_instances = 3\n")
    cfg = RunConfig.load(path, "check")
    assert cfg.seed == 4 and cfg.params["n_instances"] == 3
    with pytest.raises(ConfigError):
        RunConfig.load(path, "meta")


def test_config_errors():
    with pytest.raises(ConfigError):
        RunConfig("nope")
    with pytest.raises(ConfigError):
        RunConfig("check").set("n_instances", "many")
    with pytest.raises(ConfigError):
        RunConfig("check").set("unknown", "1")


def test_exit_code_config_error(tmp_path, capsys):
    assert main(["check", "--out", str(tmp_path), "--set", "bogus=1"]) == 2
    assert main(["check", "--config", str(tmp_path / "missing.ini")]) == 2
    assert "config error" in capsys.readouterr().err


def test_check_passes_and_writes_manifest(tmp_path, capsys):
    out = tmp_path / "ck"
    assert main(["check", "--out", str(out), "--set", "n_instances=8"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["ok"] and summary["max_fd_rel_err"] <= 1e-5
    assert {s["suite"] for s in summary["suites"]} == {
        "gradient_check", "mode_agreement", "certificate", "convergence_study"}
    man = json.loads((out / "run_manifest.json").read_text())
    digest = hashlib.sha256((out / "summary.json").read_bytes()).hexdigest()
    assert man["artifacts"]["summary.json"] == digest
    assert man["config"]["experiment"] == "check" and man["seeds"]["seed"] == 0
    assert (out / "config.ini").exists()


def test_check_broken_oracle_exit_1(tmp_path, monkeypatch, capsys):
    real = checks.random_problem

    def broken(kind, rng, n=8):
        problem, lam = real(kind, rng, n)
        inner = problem.inner
        good = inner.hvp_w
        inner.hvp_w = lambda w, l, v, data=None, penalty=True: 1.01 * good(w, l, v, data, penalty)
        return problem, lam

    monkeypatch.setattr(checks, "random_problem", broken)
    assert main(["check", "--out", str(tmp_path), "--set", "n_instances=4"]) == 1
    status = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert "gradient_check" in status["failing_suites"]


def test_divergence_exit_3(tmp_path, capsys):
    rc = main(["effect-of-t", "--out", str(tmp_path), "--set", "eta=5", "--set", "T_list=64",
               "--set", "hyper_iters=1"])
    assert rc == 3
    assert "divergence" in capsys.readouterr().err
    assert "diverged" in json.loads((tmp_path / "run_manifest.json").read_text())["status"]


def test_effect_of_t_small(tmp_path):
    out = tmp_path / "e"
    rc = main(["effect-of-t", "--out", str(out), "--set", "T_list=1,4,16",
               "--set", "hyper_iters=10", "--set", "timing_repeats=3"])
    assert rc in (0, 1)
    curves = _read_csv(out / "curves.csv")
    assert list(curves[0]) == ["hyperiter", "T", "fT", "f_exact", "test_metric"]
    assert {r["T"] for r in curves} == {"1", "4", "16", "Exact"}
    times = _read_csv(out / "times.csv")
    assert [r["T"] for r in times] == ["1", "4", "16", "Exact"]


def test_effect_of_t_single_T(tmp_path, capsys):
    out = tmp_path / "e1"
    assert main(["effect-of-t", "--out", str(out), "--set", "T_list=4",
                 "--set", "hyper_iters=5"]) == 0
    assert "r2_hg" not in json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert {r["T"] for r in _read_csv(out / "curves.csv")} == {"4", "Exact"}


def test_ridge_diag_table_and_determinism(tmp_path):
    args = ["ridge-diag", "--set", "T_list=10,50,100,250", "--set", "hyper_iters=30"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "table.csv").read_text()
    assert a == (tmp_path / "b" / "table.csv").read_text()
    rows = _read_csv(tmp_path / "a" / "table.csv")
    assert [r["T"] for r in rows] == ["10", "50", "100", "250", "Exact"]
    assert list(rows[0]) == ["T", "val_mape", "test_mape"]


def test_ridge_diag_noiseless(tmp_path):
    out = tmp_path / "n"
    main(["ridge-diag", "--out", str(out), "--set", "noise_scale=0", "--set", "T_list=10",
          "--set", "hyper_iters=20", "--set", "lam_init=-10"])
    exact = [r for r in _read_csv(out / "table.csv") if r["T"] == "Exact"][0]
    assert float(exact["val_mape"]) < 0.1


def test_meta_single_row(tmp_path):
    out = tmp_path / "m"
    rc = main(["meta", "--out", str(out), "--set", "T_list=3", "--set", "modes=full",
               "--set", "hyper_iters=3", "--set", "meta_val_episodes=3",
               "--set", "meta_test_episodes=3", "--set", "T=3"])
    assert rc == 0
    table = _read_csv(out / "table.csv")
    assert len(table) == 1 and table[0]["mode"] == "full"
    assert len(_read_csv(out / "t_sweep.csv")) == 1
    man = json.loads((out / "run_manifest.json").read_text())
    assert any(k.startswith("runlog_") for k in man["artifacts"])


def test_meta_reproducible(tmp_path):
    args = ["meta", "--set", "T_list=3", "--set", "modes=full,approx", "--set", "hyper_iters=4",
            "--set", "meta_val_episodes=3", "--set", "meta_test_episodes=3", "--set", "T=3"]
    main(args + ["--out", str(tmp_path / "a")])
    main(args + ["--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "table.csv").read_text() == (tmp_path / "b" / "table.csv").read_text()


def test_seed_flag_changes_output(tmp_path):
    args = ["ridge-diag", "--set", "T_list=10", "--set", "hyper_iters=5"]
    main(args + ["--out", str(tmp_path / "a"), "--seed", "0"])
    main(args + ["--out", str(tmp_path / "b"), "--seed", "1"])
    a = _read_csv(tmp_path / "a" / "table.csv")
    b = _read_csv(tmp_path / "b" / "table.csv")
    assert a != b
    assert json.loads((tmp_path / "b" / "run_manifest.json").read_text())["seeds"]["seed"] == 1

