import json

import pytest
import yaml

from coastfl import config as C
from coastfl.cli import EXIT_CONFIG, EXIT_IO, main
from coastfl.coast import ScoreBoard
from coastfl.errors import ConfigError

TINY = {"n_clients": 3, "n_rounds": 4, "height": 8, "width": 8, "n_train": 120, "n_val": 40,
        "hidden_dims": [8], "batch_size": 16}


def write_cfg(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def test_default_config_valid_and_roundtrips(tmp_path):
    cfg = C.ExperimentConfig()
    assert C.validate(cfg) == []
    C.save(cfg, tmp_path / "c.yaml")
    assert C.load(tmp_path / "c.yaml") == cfg
    assert C.from_mapping(cfg.to_dict()) == cfg


def test_precedence_flags_env_file(tmp_path):
    path = write_cfg(tmp_path / "c.yaml", {"k": 3, "r": 20, "seed": 4})
    env = {"COASTFL_K": "5", "COASTFL_R": "30"}
    cfg = C.load(path, {"k": 7}, env)
    assert (cfg.k, cfg.r, cfg.seed, cfg.alpha) == (7, 30.0, 4, 0.02)
    assert C.load(path, {}, env).k == 5
    assert C.load(path, {}, {}).k == 3


def test_env_parses_yaml_lists():
    cfg = C.load(None, {}, {"COASTFL_HIDDEN_DIMS": "[32, 16]"})
    assert cfg.hidden_dims == (32, 16)


def test_validation_lists_every_problem():
    with pytest.raises(ConfigError) as info:
        C.from_mapping({"k": 0, "r": 150, "setting": "weird", "n_clients": 0})
    text = " ".join(info.value.problems)
    for key in ("k", "r", "setting", "n_clients"):
        assert key in text
    assert len(info.value.problems) >= 4


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        C.from_mapping({"bogus": 1})


def test_training_hash_ignores_valuation_fields():
    a = C.ExperimentConfig()
    assert a.training_hash() == a.replace(k=5, tail_policy="drop").training_hash()
    assert a.training_hash() != a.replace(alpha=0.03).training_hash()


def test_missing_config_file_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["run", "--config", str(missing)]) == EXIT_IO
    assert str(missing) in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.yaml", {"k": -1, "alpha": 0})
    assert main(["run", "--config", str(path)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "k must" in err and "alpha must" in err


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == EXIT_CONFIG
    assert main(["run", "--seed", "x"]) == EXIT_CONFIG


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    path = write_cfg(root / "c.yaml", TINY)
    code = main(["run", "--config", str(path), "--seeds", "2", "--out", str(root / "out"),
                 "--method", "coast", "--method", "cgsv"])
    assert code == 0
    return root


def test_seeds_produce_per_seed_outputs_and_summary(tiny_run):
    out = tiny_run / "out"
    for s in (0, 1):
        d = out / f"seed_{s:04d}"
        assert (d / "report" / "report.json").is_file()
        assert (d / "logs" / "manifest.json").is_file()
        assert (d / "runtime.json").is_file()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    assert len(summary["methods"]["coast"]["rho"]) == 2
    assert C.load(out / "config.yaml").n_rounds == 4


def test_assess_reproduces_run_scoreboard(tiny_run, capsys):
    seed = tiny_run / "out" / "seed_0000"
    assert main(["assess", "--logs", str(seed / "logs"), "--out", str(tiny_run / "re")]) == 0
    original = ScoreBoard.from_csv((seed / "report" / "scores_coast.csv").read_text())
    again = ScoreBoard.from_csv((tiny_run / "re" / "scores_coast.csv").read_text())
    assert original == again
    assert "rho" in capsys.readouterr().out


def test_assess_with_different_window(tiny_run):
    logs = tiny_run / "out" / "seed_0000" / "logs"
    assert main(["assess", "--logs", str(logs), "--k", "1", "--tail-policy", "drop",
                 "--out", str(tiny_run / "k1")]) == 0
    board = ScoreBoard.from_csv((tiny_run / "k1" / "scores_coast.csv").read_text())
    assert board.rounds == [1, 2, 3]


def test_assess_empty_directory(tmp_path, capsys):
    assert main(["assess", "--logs", str(tmp_path)]) == EXIT_IO
    assert "manifest" in capsys.readouterr().err


def test_report_command(tiny_run, capsys):
    assert main(["report", str(tiny_run / "out"), str(tiny_run / "out" / "seed_0001" / "report")]) == 0
    out = capsys.readouterr().out
    assert "mean rho" in out and "rankings" in out


def test_oracle_spearman_lists_every_permutation(capsys):
    assert main(["oracle", "spearman", "--n", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 24
    for line in lines:
        oracle = line.split("oracle=")[1].split()[0]
        assert oracle == line.split("impl=")[1]


@pytest.mark.parametrize("kind", ["shapley", "prune"])
def test_oracle_other_kinds(kind, capsys):
    assert main(["oracle", kind, "--n", "4", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    if kind == "prune":
        assert "match=True" in out
    else:
        diff = float(out.strip().splitlines()[-1].split()[-1])
        assert diff <= 1e-12


def test_dump_data(tmp_path, capsys):
    path = write_cfg(tmp_path / "c.yaml", TINY)
    assert main(["dump-data", "--config", str(path), "--setting", "mask", "--out", str(tmp_path / "d")]) == 0
    names = sorted(p.name for p in (tmp_path / "d").iterdir())
    assert names == ["client_01.bin", "client_02.bin", "client_03.bin", "validation.bin"]
    assert "client 3" in capsys.readouterr().out
