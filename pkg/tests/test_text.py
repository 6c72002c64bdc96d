import numpy as np
import pytest
import torch

from dctts.audio import AudioParams, mel_spectrogram, Waveform
from dctts.corpus import load_corpus
from dctts.errors import ConfigError, InputError
from dctts.gradcheck import check_gradients
from dctts.substrate import Adam
from dctts.text import (G2P, WORD_BOUNDARY, AcousticStats, TextConfig, TextFrontend, acoustic_loss,
                        acoustic_targets, autocorrelation_pitch, default_g2p, fit_length, g2p, length_regulate)
from dctts.train import acoustic_stats_for, prepare_items

D = torch.float64
P = AudioParams()


def frontend(width=16, seed=0):
    torch.manual_seed(seed)
    return TextFrontend(TextConfig(vocab=len(default_g2p().inventory), width=width, ffn_hidden=2 * width,
                                   cond_width=width))


def test_g2p_lookup_and_boundary():
    assert g2p("cat").symbols == ["K", "AE", "T"]
    assert g2p("cat cat").symbols == ["K", "AE", "T", WORD_BOUNDARY, "K", "AE", "T"]
    assert g2p("Cat, CAT!").symbols == g2p("cat cat").symbols


def test_g2p_empty_is_error():
    with pytest.raises(InputError):
        g2p("")
    with pytest.raises(InputError):
        g2p("  123 ")


def test_g2p_unknown_word_falls_back_to_letters():
    seq = g2p("qzx")
    assert seq.symbols == ["<q>", "<z>", "<x>"]


def test_g2p_rejects_lexicon_with_unknown_phoneme():
    with pytest.raises(ConfigError):
        G2P(lexicon={"FOO": ["NOPE"]})


def test_encoder_shape_and_order_sensitivity():
    fe = frontend()
    a = fe.encode(g2p("cat").ids)
    b = fe.encode(list(reversed(g2p("cat").ids)))
    assert a.shape == (3, 16)
    assert not torch.allclose(a, b.flip(0))


def test_acoustic_prediction_shapes():
    fe = frontend()
    pred = fe.acoustic(fe.encode(g2p("see the moon").ids))
    n = len(g2p("see the moon"))
    for v in (pred.energy, pred.pitch, pred.duration):
        assert v.shape == (n,)
    assert torch.all(pred.duration >= 1.0)


def test_length_regulation():
    feats = torch.arange(6, dtype=D).reshape(2, 3)
    assert length_regulate(feats, [2, 3]).shape == (5, 3)
    assert torch.equal(length_regulate(feats, [1, 1]), feats)
    with pytest.raises(InputError):
        length_regulate(feats, [0, 0])
    with pytest.raises(InputError):
        length_regulate(feats, [1])


def test_fit_length():
    cond = torch.ones(5, 2, dtype=D)
    assert fit_length(cond, 4).shape == (4, 2)
    padded = fit_length(cond, 6)
    assert padded.shape == (6, 2) and float(padded[5].abs().sum()) == 0.0


def test_condition_uses_target_length():
    fe = frontend()
    cond, _ = fe(g2p("cat").ids, target_l=9)
    assert cond.shape == (9, 16)


def test_pitch_oracle_220hz():
    x = 0.5 * np.sin(2 * np.pi * 220.0 * np.arange(4096) / P.sample_rate)
    f0, voiced = autocorrelation_pitch(x, P.sample_rate)
    assert voiced
    lag = P.sample_rate / 220.0
    # within one lag of resolution around the true period
    assert P.sample_rate / (lag + 1) <= f0 <= P.sample_rate / (lag - 1)


def test_unvoiced_silence():
    assert autocorrelation_pitch(np.zeros(2048), P.sample_rate) == (0.0, False)


def test_acoustic_targets_spans_and_silence():
    sr, hop = P.sample_rate, P.hop_length
    x = np.concatenate([np.zeros(20 * hop), 0.5 * np.sin(2 * np.pi * 220 * np.arange(20 * hop) / sr)])
    mel = mel_spectrogram(Waveform(x)).values
    # centred windows reach two hops either side, so frames 0..9 see only silence
    targets = acoustic_targets(mel, x, [(0, 10), (10, 40)], P, time_factor=2)
    assert targets.log_energy[0] == P.log_min
    assert not targets.voiced[0] and targets.voiced[1]
    assert abs(np.exp(targets.log_pitch[1]) - 220.0) < 2.0
    assert targets.duration.tolist() == [5.0, 15.0]
    stats = AcousticStats(energy_mean=1.0, energy_std=2.0, pitch_mean=np.log(220.0), pitch_std=0.5)
    norm = targets.with_stats(stats)
    assert norm.energy[0] == pytest.approx((P.log_min - 1.0) / 2.0)
    assert norm.pitch[0] == 0.0


def test_acoustic_targets_require_partition():
    mel = np.zeros((80, 31))
    x = np.zeros(30 * 256)
    with pytest.raises(InputError):
        acoustic_targets(mel, x, [(0, 10), (12, 30)], P)
    with pytest.raises(InputError):
        acoustic_targets(mel, x, [(0, 10), (10, 20)], P)


def test_frontend_gradients():
    fe = frontend(width=8)
    ids = g2p("see the moon").ids

    def fn():
        cond, pred = fe(ids)
        return (cond ** 2).mean() + pred.energy.sum() + pred.log_duration.pow(2).sum()

    tensors = {n: p for n, p in fe.named_parameters()
               if n in ("encoder.blocks.0.attn.q.weight", "encoder.blocks.1.ffn.up.weight",
                        "duration.out.weight", "project.weight")}
    assert len(tensors) >= 3
    assert check_gradients(fn, tensors, max_coords=10, seed=0)["all"] < 1e-4


def test_duration_learned_on_toy_corpus(corpus_dir):
    corpus = load_corpus(corpus_dir)
    stats = acoustic_stats_for(prepare_items(corpus, P, split="train"))
    train = prepare_items(corpus, P, stats, split="train")
    test = prepare_items(corpus, P, stats, split="test")
    fe = frontend(width=32)
    opt = Adam(fe.named_parameters(), lr=1e-3)
    for step in range(150):
        opt.zero_grad()
        total = 0.0
        for it in train[step % 5::5]:
            parts = acoustic_loss(fe(it.ids)[1], it.targets)
            total = total + parts["energy"] + parts["pitch"] + parts["duration"]
        total.backward()
        opt.step()
    with torch.no_grad():
        err = np.mean([np.abs(fe(it.ids)[1].duration.numpy() - it.targets.duration).mean() for it in test])
    assert err < 1.0
