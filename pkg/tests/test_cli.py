import json
from pathlib import Path

import pytest

from raedsi import pipeline as pl
from raedsi.cli import main
from raedsi.core import NumericalError

TINY = ["--n-prior", "60", "--epochs", "2", "--rs-prior", "3000",
        "--set", "sampler.rml.n_samples=20", "--set", "sampler.rml.max_iter=20",
        "--set", "parameterization.rae.n_hidden=6", "--set", "parameterization.rae.n_latent=4",
        "--set", "parameterization.pca_ht.n_latent=4"]


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(autouse=True)
def no_env_root(monkeypatch):
    monkeypatch.delenv(pl.OUTPUT_ENV, raising=False)


def test_show_config_applies_overrides(capsys):
    assert main(["show-config", "--n-a", "8", "--set", "diagnostics.probs=[0.05,0.95]"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["sampler"]["n_a"] == 8
    assert cfg["diagnostics"]["probs"] == [0.05, 0.95]
    assert cfg["forward_model"]["n_prior"] == pl.DEFAULT_CONFIG["forward_model"]["n_prior"]


def test_seed_flag_replaces_stage_seeds(capsys, tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seeds": {"rml": 5}}))
    main(["show-config", "--config", str(cfg_file)])
    assert json.loads(capsys.readouterr().out)["seeds"] == {"rml": 5}
    main(["show-config", "--config", str(cfg_file), "--seed", "11"])
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["seed"] == 11 and cfg["seeds"] == {}


@pytest.mark.parametrize("argv", [
    ["show-config", "--set", "sampler.bogus=1"],
    ["show-config", "--methods", "rae+magic"],
    ["show-config", "--set", "observations.times=[181]"],
    ["show-config", "--set", "noequals"],
])
def test_config_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert "config error" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2


def test_missing_artifact_exits_4(tmp_path, capsys):
    assert main(["evaluate", "--output-dir", str(tmp_path)]) == 4
    assert "missing artifact" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, monkeypatch):
    def fail(cfg, out):
        raise NumericalError("decoder produced non-finite output")

    monkeypatch.setattr(pl, "train", fail)
    assert main(["train", "--output-dir", str(tmp_path)]) == 3


def test_environment_variable_takes_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv(pl.OUTPUT_ENV, str(tmp_path / "env"))
    assert main(["generate-prior", "--output-dir", str(tmp_path / "flag"), "--n-prior", "5"]) == 0
    assert (tmp_path / "env" / "prior" / "prior.csv").exists()
    assert not (tmp_path / "flag").exists()


def test_pipeline_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pipeline", "--output-dir", str(a)] + TINY) == 0
    assert main(["pipeline", "--output-dir", str(b)] + TINY) == 0
    ta, tb = tree(a), tree(b)
    assert ta.keys() == tb.keys()
    assert "evaluate/summary.json" in ta
    assert all(ta[k] == tb[k] for k in ta)

    # running the stages one by one gives the same artifacts
    c = tmp_path / "c"
    for stage in ["generate-prior", "train", "assimilate", "rs", "evaluate"]:
        assert main([stage, "--output-dir", str(c)] + TINY) == 0
    tc = tree(c)
    for k, v in ta.items():
        if k != "manifest.json":
            assert tc[k] == v, k


def test_changing_seed_changes_prior(tmp_path):
    main(["generate-prior", "--output-dir", str(tmp_path / "a"), "--n-prior", "5"])
    main(["generate-prior", "--output-dir", str(tmp_path / "b"), "--n-prior", "5", "--seed", "1"])
    assert (tmp_path / "a/prior/prior.csv").read_bytes() != (tmp_path / "b/prior/prior.csv").read_bytes()
