import numpy as np
import pytest
import torch

from dctts.audio import AudioParams
from dctts.config import Config
from dctts.errors import ConfigError, InputError
from dctts.train import corpus_of, prepare_items, train_stage1_vq
from dctts.vq import SpectrogramVQ, VQConfig, flatten_tokens, quantize, unflatten_tokens

D = torch.float64


@pytest.fixture(scope="module")
def vq():
    torch.manual_seed(0)
    return SpectrogramVQ(VQConfig())


def test_encode_shapes(vq):
    assert vq.encode(torch.zeros(1, 80, 88, dtype=D)).shape == (1, 4, 44, 128)
    assert vq.encode(torch.zeros(1, 80, 87, dtype=D)).shape == (1, 4, 44, 128)


def test_extreme_inputs_finite(vq):
    for v in (-1.0, 1.0):
        assert torch.isfinite(vq.encode(torch.full((1, 80, 20), v, dtype=D))).all()


def test_channel_mismatch(vq):
    with pytest.raises(ConfigError):
        vq.encode(torch.zeros(1, 64, 20, dtype=D))


def test_quantize_exact_hit():
    cb = torch.randn(10, 3, dtype=D)
    idx, zq = quantize(cb[7].reshape(1, 1, 3), cb)
    assert int(idx) == 7
    assert torch.equal(zq.reshape(3), cb[7])


def test_quantize_nearest_and_ties():
    cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=D)
    assert int(quantize(torch.tensor([[0.2, 0.1]], dtype=D), cb)[0]) == 0
    cb = torch.zeros(12, 2, dtype=D) + 5.0
    cb[3] = torch.tensor([1.0, 0.0], dtype=D)
    cb[9] = torch.tensor([-1.0, 0.0], dtype=D)
    assert int(quantize(torch.tensor([[0.0, 0.0]], dtype=D), cb)[0]) == 3


def test_quantize_straight_through():
    cb = torch.randn(4, 2, dtype=D)
    z = torch.randn(3, 2, dtype=D, requires_grad=True)
    _, zq = quantize(z, cb)
    zq.sum().backward()
    assert torch.equal(z.grad, torch.ones_like(z))


def test_decode_shape_and_determinism(vq):
    mel = torch.rand(1, 80, 87, dtype=D) * 2 - 1
    tokens = vq.tokenize(mel)
    assert tokens.shape == (1, 4, 44)
    out = vq.decode(tokens, frames=87)
    assert out.shape == mel.shape
    assert torch.equal(out, vq.decode(tokens.clone(), frames=87))
    assert out.abs().max() <= 1.0


def test_decode_rejects_bad_indices(vq):
    with pytest.raises(InputError):
        vq.decode(torch.full((1, 4, 2), 128))


def test_loss_terms_zero_for_exact_codes(vq):
    mel = torch.rand(1, 80, 8, dtype=D)
    with torch.no_grad():
        out = vq.loss(mel)
        vq2 = SpectrogramVQ(vq.cfg)
        vq2.load_state_dict(vq.state_dict())
        # put every latent cell exactly on a codebook entry
        cells = out["latent"].reshape(-1, vq.cfg.dim)
        vq2.codebook[: cells.shape[0]] = cells
        out2 = vq2.loss(mel)
    assert float(out2["commitment"]) == 0.0
    assert float(out2["codebook"]) == 0.0
    assert float(out["commitment"]) > 0.0


def test_flatten_roundtrip():
    grid = torch.arange(12).reshape(3, 4)
    seq = flatten_tokens(grid)
    # position p = t * f + i
    assert seq.tolist() == [0, 4, 8, 1, 5, 9, 2, 6, 10, 3, 7, 11]
    assert torch.equal(unflatten_tokens(seq, 3), grid)
    with pytest.raises(InputError):
        unflatten_tokens(torch.arange(5), 3)


def test_config_validation():
    with pytest.raises(ConfigError):
        SpectrogramVQ(VQConfig(K=1))
    with pytest.raises(ConfigError):
        SpectrogramVQ(VQConfig(freq_strides=(3, 2, 2)))


@pytest.fixture(scope="module")
def trained_vq(tmp_path_factory, corpus_dir):
    run = tmp_path_factory.mktemp("vq")
    cfg = Config.toy({"corpus.dir": str(corpus_dir), "run.dir": str(run), "vq.steps": 200})
    return cfg, train_stage1_vq(cfg)


def test_vq_training_loss_halves(trained_vq):
    _, res = trained_vq
    first, last = res.losses[0]["total"], res.losses[-1]["total"]
    assert last < 0.5 * first


def test_vq_reconstruction_beats_mean_baseline(trained_vq):
    cfg, res = trained_vq
    items = prepare_items(corpus_of(cfg), AudioParams(), split="train")
    mels = [torch.as_tensor(it.mel, dtype=D) for it in items]
    mean = torch.stack([m.mean(1) for m in mels]).mean(0)
    base = np.mean([float(((m - mean[:, None]) ** 2).mean()) for m in mels])
    with torch.no_grad():
        err = np.mean([float(((res.vq.decode(res.vq.tokenize(m), m.shape[1])[0] - m) ** 2).mean()) for m in mels])
    assert err < 0.5 * base
