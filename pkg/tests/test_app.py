import csv

import pytest

from uda_forge import app
from uda_forge.config import RunConfig, dump_config, load_config

TINY = RunConfig(seed=2, n_source=8, n_target=8, n_source_holdout=4, batch_size=4, E_pre=1,
                 E_teach=1, E_decay=1, E_reinit=0, probe_size=4, froc_every=1)


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(dump_config(TINY))
    return p


def test_help_and_usage_errors(capsys):
    assert app.run(["--help"]) == 0
    assert app.run([]) == 1
    assert app.run(["frobnicate"]) == 1
    assert app.run(["synth"]) == 1  # --out missing
    assert app.run(["grad-check", "--instances", "0"]) == 1
    assert app.run(["adapt", "--out", "x", "--fpi", "a,b"]) == 1


def test_bad_config_is_usage_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("gamma_ema = 1.5\n")
    assert app.run(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_runtime_failure_exit_code(tmp_path, cfg_file):
    missing = tmp_path / "nope.ckpt"
    assert app.run(["eval", "--config", str(cfg_file), "--ckpt", str(missing),
                    "--out", str(tmp_path / "e")]) == 2


def test_grad_check_passes(capsys):
    assert app.run(["grad-check", "--seed", "5"]) == 0
    assert "max relative error" in capsys.readouterr().out


def test_pipeline(tmp_path, cfg_file):
    c = str(cfg_file)
    assert app.run(["synth", "--config", c, "--out", str(tmp_path / "data")]) == 0
    for d in ("source", "target", "source_holdout"):
        assert (tmp_path / "data" / d).is_dir()

    pre = tmp_path / "pre"
    assert app.run(["pretrain", "--config", c, "--out", str(pre)]) == 0
    assert load_config(pre / "config.toml") == TINY
    assert (pre / "source.ckpt").exists() and (pre / "froc_source_holdout.csv").exists()

    ad = tmp_path / "ad"
    assert app.run(["adapt", "--config", c, "--source-ckpt", str(pre / "source.ckpt"),
                    "--out", str(ad), "--no-adv"]) == 0
    for name in ("train_log.csv", "adapt.ckpt", "report.txt", "froc_target.csv", "froc_epoch_0.csv"):
        assert (ad / name).exists(), name
    assert load_config(ad / "config.toml").enable_adv is False

    ev = tmp_path / "ev"
    assert app.run(["eval", "--config", c, "--ckpt", str(ad / "adapt.ckpt"),
                    "--data", str(tmp_path / "data" / "target"), "--out", str(ev)]) == 0
    metrics = (ev / "metrics.txt").read_text()
    assert "images=8" in metrics and "R@0.3=" in metrics
    with open(ev / "detections.csv") as fh:
        assert next(csv.reader(fh)) == ["image_id", "cx", "cy", "w", "h", "score"]

    svg = tmp_path / "plot.svg"
    assert app.run(["froc-plot", "--out", str(svg), str(ad / "froc_target.csv"),
                    str(pre / "froc_source_holdout.csv"), "--labels", "target,source"]) == 0
    assert svg.read_text().startswith("<svg")
    assert app.run(["froc-plot", "--out", str(svg), str(ad / "froc_target.csv"),
                    "--labels", "a,b"]) == 1


def test_adapt_outputs_are_reproducible(tmp_path, cfg_file):
    for run in ("a", "b"):
        assert app.run(["adapt", "--config", str(cfg_file), "--out", str(tmp_path / run)]) == 0
    for name in ("source.ckpt", "adapt.ckpt", "train_log.csv", "report.txt", "froc_target.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_ablation_rows_coincide_without_adaptation(tmp_path):
    cfg = TINY.replace(E_teach=0, E_decay=0, E_reinit=0)
    res = app.ablate(cfg, seeds=(1,), out_dir=tmp_path, workers=1)
    assert list(res.runs) == list(app.ABLATION_ROWS)
    first = res.median("source-only")
    assert all(res.median(r) == first for r in res.runs)
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + len(app.ABLATION_ROWS)
    assert rows[0][0] == "config" and rows[0][1:] == [f"R@{f:g}" for f in cfg.fpi]


def test_ablate_cli(tmp_path, cfg_file):
    assert app.run(["ablate", "--config", str(cfg_file), "--seeds", "1",
                    "--out", str(tmp_path / "abl")]) == 0
    assert (tmp_path / "abl" / "ablation.csv").exists()
    assert (tmp_path / "abl" / "checkpoints" / "source_seed1.ckpt").exists()


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("UDA_FORGE_THREADS", "3")
    assert app.worker_count() == 3
    monkeypatch.setenv("UDA_FORGE_THREADS", "many")
    with pytest.raises(app.UsageError):
        app.worker_count()
