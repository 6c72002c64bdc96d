import hashlib

import numpy as np
import pytest

from dctts.audio import AudioParams, mel_band_edges, mel_spectrogram
from dctts.corpus import (TOY_PHONEMES, PhonemeRule, ToyCorpusSpec, default_spec, generate_toy_corpus,
                          load_corpus, save_corpus, synthesize_utterance)
from dctts.errors import ConfigError, InputError
from dctts.text import WORD_BOUNDARY, g2p

P = AudioParams()


def spec_for(*texts, held_out=1):
    return ToyCorpusSpec(phonemes=dict(TOY_PHONEMES), utterances=list(texts), held_out=held_out)


def test_construction_arithmetic():
    phones = ["AE", "M"]
    x, spans = synthesize_utterance(phones, spec_for("a", "b"), P, np.random.default_rng(0))
    # 12 + 8 frames at 256 samples per hop
    assert spans == [(0, 12), (12, 20)]
    assert len(x) == 20 * P.hop_length


def test_boundary_is_silent():
    phones = ["AE", WORD_BOUNDARY, "M"]
    spec = spec_for("a", "b")
    x, spans = synthesize_utterance(phones, spec, P, np.random.default_rng(0))
    assert spans[1] == (12, 16)
    half = int(round(spec.crossfade_ms * 1e-3 * P.sample_rate)) // 2
    assert np.all(x[12 * P.hop_length + half:16 * P.hop_length - half] == 0.0)


def test_default_spec_shape():
    spec = default_spec(seed=0)
    assert len(spec.utterances) == 25 and spec.held_out == 5
    train, test = spec.utterances[:20], spec.utterances[20:]
    train_words = {w for u in train for w in u.split()}
    assert all(w in train_words for u in test for w in u.split())
    assert not set(train) & set(test)


def test_every_utterance_has_62_frames():
    corpus = generate_toy_corpus(default_spec(seed=0))
    for u in corpus.utterances:
        assert u.frames == 62
        assert len(u.waveform.samples) == 62 * P.hop_length
        assert u.phonemes == g2p(u.text).symbols
    assert len(corpus.train) == 20 and len(corpus.test) == 5


def test_same_seed_same_bytes(tmp_path):
    def digest(out):
        save_corpus(generate_toy_corpus(default_spec(seed=3)), out)
        h = hashlib.sha256()
        for f in sorted(out.rglob("*")):
            if f.is_file():
                h.update(f.read_bytes())
        return h.hexdigest()

    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_span_dominant_mel_channel(corpus_dir):
    corpus = load_corpus(corpus_dir)
    edges = mel_band_edges(P)
    u = corpus.utterances[0]
    mel = mel_spectrogram(u.waveform).values
    for p, (a, b) in zip(u.phonemes, u.spans):
        if p == WORD_BOUNDARY or b - a < 6:
            continue
        ch = int(np.argmax(mel[:, a + 2:b - 2].mean(axis=1)))
        freq = TOY_PHONEMES[p].freq
        assert edges[ch] <= freq <= edges[ch + 2], (p, ch)


def test_spec_json_roundtrip():
    spec = default_spec(seed=1)
    back = ToyCorpusSpec.from_json(spec.to_json())
    assert back == spec


def test_spec_validation():
    with pytest.raises(ConfigError):
        ToyCorpusSpec.from_json("{not json")
    bad = spec_for("cat", "moon")
    bad.phonemes["AA"] = PhonemeRule(5000.0, 0.3, 8)
    with pytest.raises(ConfigError):
        bad.validate()
    with pytest.raises(ConfigError):
        spec_for("cat", held_out=1).validate()
    with pytest.raises(ConfigError):
        default_spec(frames=7)


def test_unknown_phoneme_is_input_error():
    with pytest.raises(InputError):
        generate_toy_corpus(spec_for("cat", "thought"))


def test_save_load_roundtrip(tmp_path):
    corpus = generate_toy_corpus(default_spec(seed=0, n_train=3, n_test=1))
    back = load_corpus(save_corpus(corpus, tmp_path / "c"))
    assert [u.text for u in back.utterances] == [u.text for u in corpus.utterances]
    assert [u.split for u in back.utterances] == [u.split for u in corpus.utterances]
    assert back.utterances[0].spans == corpus.utterances[0].spans
    # 16-bit PCM quantisation is the only loss
    assert np.max(np.abs(back.utterances[0].waveform.samples - corpus.utterances[0].waveform.samples)) <= 0.5 / 32767 + 1e-12


def test_load_missing_index(tmp_path):
    with pytest.raises(ConfigError):
        load_corpus(tmp_path)
