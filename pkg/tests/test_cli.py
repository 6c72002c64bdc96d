import csv

import pytest
from click.testing import CliRunner

from dctts.cli import main

from conftest import small_config


@pytest.fixture
def runner():
    return CliRunner()


def test_help_lists_commands(runner):
    out = runner.invoke(main, ["--help"]).output
    for cmd in ("corpus-gen", "train-vq", "train-diffusion", "synthesize", "bench", "accept", "report", "schedule"):
        assert cmd in out


def test_schedule_csv(runner, tmp_path):
    res = runner.invoke(main, ["schedule", "--T", "4", "--K", "2", "--out", str(tmp_path / "s.csv")])
    assert res.exit_code == 0, res.output
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    last = dict(zip(rows[0], rows[-1]))
    assert float(last["gamma_bar"]) == pytest.approx(0.9, abs=1e-15)


def test_schedule_bad_args_is_config_error(runner, tmp_path):
    res = runner.invoke(main, ["schedule", "--T", "0", "--out", str(tmp_path / "s.csv")])
    assert res.exit_code == 2


def test_corpus_gen(runner, tmp_path):
    res = runner.invoke(main, ["corpus-gen", "--out", str(tmp_path / "c"), "--seed", "1"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "c" / "corpus.json").exists()
    assert len(list((tmp_path / "c" / "wav").glob("*.wav"))) == 25


def test_missing_spec_file(runner, tmp_path):
    res = runner.invoke(main, ["corpus-gen", "--out", str(tmp_path), "--spec", str(tmp_path / "nope.json")])
    assert res.exit_code == 2


def test_missing_config_file(runner, tmp_path):
    res = runner.invoke(main, ["train-vq", "--config", str(tmp_path / "absent.txt")])
    assert res.exit_code == 2


def test_bad_config_key(runner, tmp_path):
    (tmp_path / "c.txt").write_text("vq.K = 16\nbogus.key = 3\n")
    res = runner.invoke(main, ["train-vq", "--config", str(tmp_path / "c.txt")])
    assert res.exit_code == 2
    assert "bogus.key" in res.output


def test_synthesize_missing_checkpoint(runner, tmp_path):
    res = runner.invoke(main, ["synthesize", "--text", "cat", "--ckpt", str(tmp_path), "--out",
                               str(tmp_path / "a.wav")])
    assert res.exit_code == 2


def test_synthesize_empty_text_is_input_error(runner, tiny_run, tmp_path):
    res = runner.invoke(main, ["synthesize", "--text", "!!", "--ckpt", str(tiny_run), "--out",
                               str(tmp_path / "a.wav"), "--steps", "3"])
    assert res.exit_code == 1


def test_synthesize_and_report(runner, fresh_run, tmp_path):
    res = runner.invoke(main, ["synthesize", "--text", "see the moon", "--ckpt", str(fresh_run), "--steps", "4",
                               "--iterations", "4", "--out", str(tmp_path / "o.wav"), "--plot"])
    assert res.exit_code == 0, res.output
    for suffix in (".wav", ".mel", ".tok", ".png"):
        assert (tmp_path / ("o" + suffix)).exists(), suffix
    res = runner.invoke(main, ["report", "--run", str(fresh_run)])
    assert res.exit_code == 0, res.output
    assert (fresh_run / "report" / "loss.csv").exists()


def test_train_commands(runner, corpus_dir, tmp_path):
    cfg = small_config(corpus_dir, tmp_path / "run", **{"vq.steps": 3, "train.steps": 2})
    cfg.save(tmp_path / "c.txt")
    assert runner.invoke(main, ["train-vq", "--config", str(tmp_path / "c.txt")]).exit_code == 0
    res = runner.invoke(main, ["train-diffusion", "--config", str(tmp_path / "c.txt")])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "run" / "diffusion.dckp").exists()


def test_accept_subset(runner, tmp_path):
    res = runner.invoke(main, ["accept", "--only", "1,6", "--csv", str(tmp_path / "a.csv")])
    assert res.exit_code == 0, res.output
    assert res.output.count("[PASS]") == 2
    assert "2/2 criteria passed" in res.output


def test_accept_bad_selection(runner):
    assert runner.invoke(main, ["accept", "--only", "x"]).exit_code == 2
    assert runner.invoke(main, ["accept", "--only", "11"]).exit_code == 2
