import json

import pytest
import yaml

from gimlab import cli

TINY = {
    "datagen": {"train_per_family": 3, "test_per_family": 2, "cross_dist_test": 2},
    "tracer": {"hidden": 4, "num_layers": 3, "iterations": 2, "batch_size": 2, "patch_size": 32, "log_every": 1},
    "model": {"dims": [8, 16, 16, 16], "depths": [1, 1, 1, 1], "heads": [1, 1, 1, 1], "decoder_dim": 8,
              "head_dim": 8, "epochs": 1, "batch_size": 4, "monitor_size": 8},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_config_layering(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("GIMLAB_OUT", str(tmp_path / "env"))
    cfg = cli.load_config(tiny_config, ["tracer.lr=0.5", "model.ablate=[mwam]"], seed=9)
    assert cfg.tracer_hp().lr == 0.5 and cfg.tracer_hp().iterations == 2
    assert cli.load_config(tiny_config, ["model.lr=6e-5"]).train_hp().lr == 6e-5
    assert cfg.seed == 9 and str(cfg.root) == str(tmp_path / "env")
    assert not cfg.model_arch().use_mwam
    assert cli.load_config(tiny_config, out=str(tmp_path / "x")).root == tmp_path / "x"


def test_seed_changes_fingerprints(tiny_config):
    a = cli.load_config(tiny_config, seed=1)
    b = cli.load_config(tiny_config, seed=2)
    assert a.data_fingerprint() != b.data_fingerprint()
    assert a.tracer_fingerprint() != b.tracer_fingerprint()
    assert a.data_fingerprint() == cli.load_config(tiny_config, seed=1).data_fingerprint()


@pytest.mark.parametrize("override", ["tracer.bogus=1", "model.ablate=[decoder]", "datagen.alpha=0.2",
                                      "model.setting=both", "eval.score=vote", "nosection=1",
                                      "tracer.iterations=ten", "model.lr=fast"])
def test_invalid_config_exits_2(tiny_config, tmp_path, override):
    assert run("gen-data", "--config", tiny_config, "--out", tmp_path, "--set", override) == cli.EXIT_CONFIG


def test_missing_inputs_exit_2(tiny_config, tmp_path):
    assert run("train-tracer", "--config", tiny_config, "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("report", "--out", tmp_path) == cli.EXIT_CONFIG
    assert run("gen-data", "--config", tmp_path / "missing.yaml", "--out", tmp_path) == cli.EXIT_CONFIG


def test_gen_data_layout_and_idempotence(tiny_config, tmp_path, capsys):
    assert run("gen-data", "--config", tiny_config, "--out", tmp_path) == 0
    cfg = cli.load_config(tiny_config, out=str(tmp_path))
    data = cfg.data_dir()
    assert {p.name for p in data.iterdir() if p.is_dir()} == {"SD-like", "GLIDE-like", "DDNM-like", "cross-dist"}
    stamp = cfg.manifest_path().stat().st_mtime_ns
    assert run("gen-data", "--config", tiny_config, "--out", tmp_path) == 0
    assert cfg.manifest_path().stat().st_mtime_ns == stamp
    assert not list(tmp_path.glob("data/*.partial"))


def test_divergence_exits_3(tiny_config, tmp_path):
    assert run("gen-data", "--config", tiny_config, "--out", tmp_path) == 0
    code = run("train-tracer", "--config", tiny_config, "--out", tmp_path, "--set", "tracer.lr=1e30",
               "--set", "tracer.iterations=5")
    assert code == cli.EXIT_NUMERIC


def test_full_pipeline(tiny_config, tmp_path, capsys):
    base = ("--config", tiny_config, "--out", tmp_path)
    assert run("gen-data", *base) == 0
    assert run("train-tracer", *base) == 0
    cfg = cli.load_config(tiny_config, out=str(tmp_path))
    tracer_log = cfg.tracer_path().parent / "tracer_loss.jsonl"
    assert len(tracer_log.read_text().splitlines()) == 2
    assert run("train-model", *base) == 0
    assert run("train-model", *base, "--ablate", "tracer", "--ablate", "fsb") == 0
    ckpts = sorted(tmp_path.glob("ckpt/*/model.pt"))
    assert len(ckpts) == 2
    train_log = [json.loads(l) for l in (cfg.model_path(cfg.tracer_fingerprint()).parent / "train_log.jsonl")
                 .read_text().splitlines()]
    assert [r["epoch"] for r in train_log] == [0, 1]
    capsys.readouterr()
    assert run("eval", *base, "--robustness") == 0
    out = capsys.readouterr().out
    assert "SD-like" in out and "Downsample (0.5X)" in out
    assert run("eval", *base, "--set", "eval.setting=cross") == 0
    assert len(list(tmp_path.glob("reports/*/report.jsonl"))) == 2
    capsys.readouterr()
    assert run("report", "--out", tmp_path) == 0
    assert capsys.readouterr().out.count("setting=") == 2
    # a finished stage is skipped on rerun
    stamp = cfg.tracer_path().stat().st_mtime_ns
    assert run("train-tracer", *base) == 0
    assert cfg.tracer_path().stat().st_mtime_ns == stamp
