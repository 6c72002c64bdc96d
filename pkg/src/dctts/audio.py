"""Waveform <-> log-mel conversion and Griffin-Lim phase reconstruction."""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import nnls

from .errors import InputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AudioParams:
    sample_rate: int = 22050
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    log_min: float = -11.5
    log_max: float = 6.0

    @classmethod
    def from_config(cls, cfg) -> "AudioParams":
        return cls(
            sample_rate=cfg["audio.sample_rate"],
            n_fft=cfg["audio.n_fft"],
            win_length=cfg["audio.win_length"],
            hop_length=cfg["audio.hop_length"],
            n_mels=cfg["audio.n_mels"],
            fmin=cfg["audio.fmin"],
            fmax=cfg["audio.fmax"],
            log_floor=cfg["audio.log_floor"],
            log_min=cfg["audio.log_min"],
            log_max=cfg["audio.log_max"],
        )

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 22050

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains non-finite samples")

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    """Normalised log-mel values, shape ``[n_mels, frames]`` in [-1, 1]."""

    values: np.ndarray
    hop_length: int = 256
    win_length: int = 1024
    n_fft: int = 1024

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(params: AudioParams) -> np.ndarray:
    """``n_mels + 2`` Hz points: filter m spans edges[m]..edges[m+2], peaks at edges[m+1]."""
    mels = np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2)
    return mel_to_hz(mels)


@lru_cache(maxsize=8)
def mel_filterbank(params: AudioParams = AudioParams()) -> np.ndarray:
    """HTK-scale triangular filters (peak 1), shape ``[n_mels, n_fft//2 + 1]``."""
    edges = mel_band_edges(params)
    freqs = np.arange(params.n_bins) * params.sample_rate / params.n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _window(win_length: int, n_fft: int) -> np.ndarray:
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)
    if win_length < n_fft:
        left = (n_fft - win_length) // 2
        w = np.pad(w, (left, n_fft - win_length - left))
    w.setflags(write=False)
    return w


def stft(x: np.ndarray, params: AudioParams, pad_mode: str = "reflect") -> np.ndarray:
    """Centred STFT, complex ``[n_bins, 1 + len(x) // hop]``."""
    x = np.asarray(x, dtype=np.float64)
    half = params.n_fft // 2
    padded = np.pad(x, (half, half), mode=pad_mode)
    frames = sliding_window_view(padded, params.n_fft)[:: params.hop_length]
    return np.fft.rfft(frames * _window(params.win_length, params.n_fft), axis=-1).T


def istft(spec: np.ndarray, params: AudioParams, length: int) -> np.ndarray:
    """Least-squares inverse of the zero-padded centred STFT."""
    n_fft, hop = params.n_fft, params.hop_length
    w = _window(params.win_length, n_fft)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=-1) * w
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    y = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        y[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += w * w
    nz = norm > 1e-12
    y[nz] /= norm[nz]
    half = n_fft // 2
    out = y[half:half + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


def normalize_log_mel(mel_mag: np.ndarray, params: AudioParams) -> np.ndarray:
    log_mel = np.log(np.maximum(mel_mag, params.log_floor))
    log_mel = np.clip(log_mel, params.log_min, params.log_max)
    return 2.0 * (log_mel - params.log_min) / (params.log_max - params.log_min) - 1.0


def denormalize_log_mel(values: np.ndarray, params: AudioParams) -> np.ndarray:
    """Normalised values back to natural-log mel magnitudes."""
    return (np.asarray(values) + 1.0) * 0.5 * (params.log_max - params.log_min) + params.log_min


def mel_magnitude(w: Waveform, params: AudioParams = AudioParams()) -> np.ndarray:
    if len(w.samples) < 1:
        raise InputError("empty waveform")
    return mel_filterbank(params) @ np.abs(stft(w.samples, params))


def mel_spectrogram(w: Waveform, params: AudioParams = AudioParams()) -> MelSpectrogram:
    values = normalize_log_mel(mel_magnitude(w, params), params)
    return MelSpectrogram(values, params.hop_length, params.win_length, params.n_fft)


@dataclass
class LiftResult:
    magnitude: np.ndarray
    clamped: int = 0


def lift_to_linear(mel_mag: np.ndarray, params: AudioParams, method: str = "nnls") -> LiftResult:
    """Linear-frequency magnitudes ``s >= 0`` with ``filterbank @ s ~= mel_mag`` per frame."""
    fb = mel_filterbank(params)
    if method == "pinv":
        lin = np.linalg.pinv(fb) @ mel_mag
        clamped = int(np.sum(lin < 0))
        if clamped:
            logger.warning("clamped %d negative magnitudes after mel lifting", clamped)
        return LiftResult(np.maximum(lin, 0.0), clamped)
    if method != "nnls":
        raise InputError(f"unknown lifting method {method!r}")
    # bins outside every filter's support stay at zero
    support = np.flatnonzero(fb.sum(axis=0) > 0)
    sub = np.ascontiguousarray(fb[:, support])
    lin = np.zeros((fb.shape[1], mel_mag.shape[1]))
    solved = {}
    for j in range(mel_mag.shape[1]):
        key = mel_mag[:, j].tobytes()
        if key not in solved:
            solved[key] = nnls(sub, mel_mag[:, j], maxiter=50 * sub.shape[1])[0]
        lin[support, j] = solved[key]
    return LiftResult(lin, 0)


def spectral_convergence(target: np.ndarray, spec: np.ndarray) -> float:
    """Parseval-weighted || |X| - S || / ||S|| over the one-sided spectrum."""
    c = np.full((target.shape[0], 1), 2.0)
    c[0] = 1.0
    if target.shape[0] % 2 == 1:
        c[-1] = 1.0
    num = np.sqrt(np.sum(c * (np.abs(spec) - target) ** 2))
    den = np.sqrt(np.sum(c * target ** 2))
    return float(num / den) if den > 0 else float(num)


@dataclass
class GriffinLimResult:
    waveform: Waveform
    objective: List[float] = field(default_factory=list)
    clamped: int = 0


def griffin_lim_magnitude(magnitude: np.ndarray, iterations: int, params: AudioParams) -> GriffinLimResult:
    """Classic Griffin-Lim from zero phase on a linear magnitude spectrogram."""
    if iterations < 1:
        raise InputError(f"iterations must be >= 1, got {iterations}")
    length = params.hop_length * (magnitude.shape[1] - 1)
    x = istft(magnitude.astype(np.complex128), params, length)
    history = []
    for _ in range(iterations):
        spec = stft(x, params, pad_mode="constant")
        history.append(spectral_convergence(magnitude, spec))
        x = istft(magnitude * np.exp(1j * np.angle(spec)), params, length)
    return GriffinLimResult(Waveform(x, params.sample_rate), history)


def griffin_lim(m: MelSpectrogram, iterations: int = 32, params: AudioParams = AudioParams(),
                method: str = "nnls", return_info: bool = False):
    """Invert a normalised log-mel spectrogram to audio."""
    mel_mag = np.exp(denormalize_log_mel(m.values, params))
    lifted = lift_to_linear(mel_mag, params, method)
    result = griffin_lim_magnitude(lifted.magnitude, iterations, params)
    result.clamped = lifted.clamped
    return result if return_info else result.waveform
