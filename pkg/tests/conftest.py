import shutil

import pytest

from dctts.config import Config
from dctts.corpus import default_spec, generate_toy_corpus, save_corpus


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    save_corpus(generate_toy_corpus(default_spec(seed=0)), out)
    return out


def small_config(corpus_dir, run_dir, **overrides) -> Config:
    """Toy config shrunk further so a full two-stage run takes seconds."""
    values = {
        "corpus.dir": str(corpus_dir),
        "run.dir": str(run_dir),
        "vq.K": 16,
        "vq.dim": 8,
        "vq.channels": "4,8,8",
        "vq.steps": 12,
        "text.width": 16,
        "text.ffn_hidden": 32,
        "denoiser.layers": 1,
        "denoiser.heads": 2,
        "denoiser.width": 16,
        "train.steps": 8,
    }
    values.update(overrides)
    return Config.toy(values)


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, corpus_dir):
    """A complete (undertrained) two-stage run for plumbing tests."""
    from dctts.train import train_stage1_vq, train_stage2_diffusion

    run = tmp_path_factory.mktemp("run")
    cfg = small_config(corpus_dir, run)
    train_stage1_vq(cfg)
    train_stage2_diffusion(cfg)
    return run


@pytest.fixture
def fresh_run(tmp_path, tiny_run):
    """Copy of ``tiny_run`` the test may modify."""
    dst = tmp_path / "run"
    shutil.copytree(tiny_run, dst)
    return dst
