import numpy as np
import pytest

from dctts.acceptance import random_toy_mels, sine_bin_check
from dctts.audio import (AudioParams, MelSpectrogram, Waveform, denormalize_log_mel, griffin_lim,
                         griffin_lim_magnitude, istft, lift_to_linear, mel_band_edges, mel_filterbank,
                         mel_spectrogram, normalize_log_mel, spectral_convergence, stft)
from dctts.errors import InputError

P = AudioParams()


def sine(freq, seconds=1.0, amp=1.0):
    n = int(P.sample_rate * seconds)
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / P.sample_rate)


def test_frame_count():
    m = mel_spectrogram(Waveform(np.zeros(22050)))
    assert m.values.shape == (80, 87)


def test_silence_is_floor():
    m = mel_spectrogram(Waveform(np.zeros(5000)))
    assert np.all(m.values == -1.0)


def test_values_in_range():
    m = mel_spectrogram(Waveform(sine(300, amp=50.0)))
    assert m.values.min() >= -1.0 and m.values.max() <= 1.0


@pytest.mark.parametrize("freq", [220.0, 440.0, 1500.0])
def test_sine_peaks_in_containing_filter(freq):
    m = mel_spectrogram(Waveform(sine(freq)))
    ch = int(np.argmax(m.values[:, 10:-10].mean(axis=1)))
    edges = mel_band_edges(P)
    # filter ``ch`` covers edges[ch]..edges[ch+2]
    assert edges[ch] <= freq <= edges[ch + 2]
    fb = mel_filterbank(P)
    bin_ = int(round(freq * P.n_fft / P.sample_rate))
    assert fb[ch, bin_] > 0


def test_filterbank_shape_and_peak():
    fb = mel_filterbank(P)
    assert fb.shape == (80, 513)
    assert fb.max() <= 1.0 + 1e-12


def test_normalization_roundtrip():
    mag = np.array([[1e-7, 1e-3, 1.0, 50.0]])
    back = denormalize_log_mel(normalize_log_mel(mag, P), P)
    assert np.allclose(back, np.clip(np.log(np.clip(mag, 1e-5, None)), P.log_min, P.log_max))


def test_stft_istft_roundtrip():
    x = np.random.default_rng(0).standard_normal(4000)
    y = istft(stft(x, P, pad_mode="constant"), P, len(x))
    assert np.max(np.abs(x - y)) < 1e-10


def test_waveform_validation():
    with pytest.raises(InputError):
        Waveform(np.array([0.0, np.nan]))
    with pytest.raises(InputError):
        Waveform(np.zeros(3), sample_rate=0)


def test_lift_nonnegative_and_consistent():
    m = mel_spectrogram(Waveform(sine(700)))
    mag = np.exp(denormalize_log_mel(m.values, P))
    lifted = lift_to_linear(mag, P)
    assert lifted.magnitude.min() >= 0.0
    resid = np.linalg.norm(mel_filterbank(P) @ lifted.magnitude - mag) / np.linalg.norm(mag)
    assert resid < 0.05


def test_lift_pinv_reports_clamping():
    m = mel_spectrogram(Waveform(sine(700)))
    res = lift_to_linear(np.exp(denormalize_log_mel(m.values, P)), P, method="pinv")
    assert res.magnitude.min() >= 0.0
    assert res.clamped >= 0
    with pytest.raises(InputError):
        lift_to_linear(np.ones((80, 2)), P, method="magic")


def test_spectral_convergence_zero_for_exact():
    x = np.random.default_rng(1).standard_normal(3000)
    spec = stft(x, P, pad_mode="constant")
    assert spectral_convergence(np.abs(spec), spec) == 0.0


def test_griffin_lim_silence():
    m = MelSpectrogram(np.full((80, 40), -1.0))
    y = griffin_lim(m, 8, P)
    assert np.max(np.abs(y.samples)) < 1e-3
    assert len(y.samples) == 39 * P.hop_length


def test_griffin_lim_monotone():
    for m in random_toy_mels(2, seed=3):
        mag = lift_to_linear(np.exp(denormalize_log_mel(m.values, P)), P).magnitude
        obj = np.array(griffin_lim_magnitude(mag, 32, P).objective)
        assert np.all(np.diff(obj) <= 1e-10)


def test_griffin_lim_rejects_zero_iterations():
    with pytest.raises(InputError):
        griffin_lim_magnitude(np.ones((513, 3)), 0, P)


def test_sine_reconstruction_bin():
    bins = sine_bin_check(440.0, 100)
    assert abs(bins["source_bin"] - bins["reconstructed_bin"]) <= 1
