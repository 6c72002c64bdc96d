"""Text front end: lexicon g2p, phoneme encoder, parallel acoustic extractors,
length regulation into per-column condition features, and acoustic targets.
"""

import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .audio import AudioParams, denormalize_log_mel
from .errors import ConfigError, InputError
from .substrate import (DTYPE, Conv1d, DepthwiseSeparableConv1d, Embedding, FeedForward,
                        LayerNorm, Linear, MultiHeadSelfAttention)

WORD_BOUNDARY = "<wb>"


# ---------------------------------------------------------------------------
# g2p
# ---------------------------------------------------------------------------

def read_inventory(path) -> List[str]:
    """One symbol per line; a symbol's id is its (0-based) line number."""
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def read_lexicon(path) -> Dict[str, List[str]]:
    lexicon = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "\t" not in line:
            raise ConfigError(f"{path}:{lineno}: expected WORD<TAB>PHONEMES")
        word, phones = line.split("\t", 1)
        lexicon[word.strip().upper()] = phones.split()
    return lexicon


def _data_path(name: str) -> Path:
    return Path(str(resources.files("dctts") / "data" / name))


@dataclass
class PhonemeSequence:
    ids: List[int]
    symbols: List[str]

    def __len__(self):
        return len(self.ids)


class G2P:
    """Lexicon lookup with per-letter fallback for out-of-vocabulary words."""

    def __init__(self, lexicon: Optional[Dict[str, List[str]]] = None,
                 inventory: Optional[List[str]] = None):
        self.lexicon = lexicon if lexicon is not None else read_lexicon(_data_path("lexicon.txt"))
        self.inventory = inventory if inventory is not None else read_inventory(_data_path("phonemes.txt"))
        self.index = {s: i for i, s in enumerate(self.inventory)}
        for word, phones in self.lexicon.items():
            missing = [p for p in phones if p not in self.index]
            if missing:
                raise ConfigError(f"lexicon entry {word!r} uses unknown phonemes {missing}")

    @staticmethod
    def words(text: str) -> List[str]:
        return [w for w in re.split(r"[^a-z]+", text.lower()) if w]

    def word_phonemes(self, word: str) -> List[str]:
        phones = self.lexicon.get(word.upper())
        if phones is None:
            phones = [f"<{ch}>" for ch in word.lower()]
        return list(phones)

    def __call__(self, text: str) -> PhonemeSequence:
        words = self.words(text)
        if not words:
            raise InputError(f"no alphabetic content in {text!r}")
        symbols: List[str] = []
        for i, word in enumerate(words):
            if i:
                symbols.append(WORD_BOUNDARY)
            symbols.extend(self.word_phonemes(word))
        return PhonemeSequence([self.index[s] for s in symbols], symbols)


@lru_cache(maxsize=1)
def default_g2p() -> G2P:
    return G2P()


def g2p(text: str) -> PhonemeSequence:
    return default_g2p()(text)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

@dataclass
class TextConfig:
    vocab: int = 66
    width: int = 128
    heads: int = 2
    blocks: int = 2
    conv_kernel: int = 5
    ffn_hidden: int = 512
    ffn_kernel: int = 3
    extractor_kernel: int = 3
    extractor_blocks: int = 2
    cond_width: int = 128
    max_duration: float = 64.0

    @classmethod
    def from_config(cls, cfg, vocab: int) -> "TextConfig":
        return cls(vocab=vocab, width=cfg["text.width"], heads=cfg["text.heads"],
                   blocks=cfg["text.blocks"], conv_kernel=cfg["text.conv_kernel"],
                   ffn_hidden=cfg["text.ffn_hidden"], ffn_kernel=cfg["text.ffn_kernel"],
                   extractor_kernel=cfg["text.extractor_kernel"],
                   extractor_blocks=cfg["text.extractor_blocks"],
                   cond_width=cfg["denoiser.width"], max_duration=cfg["text.max_duration"])


class EncoderBlock(nn.Module):
    """Separable conv -> self-attention (+res, LN) -> conv FFN (+res, LN)."""

    def __init__(self, width, heads, conv_kernel, ffn_hidden, ffn_kernel):
        super().__init__()
        self.conv = DepthwiseSeparableConv1d(width, width, conv_kernel)
        self.attn = MultiHeadSelfAttention(width, heads)
        self.norm1 = LayerNorm(width)
        self.ffn = FeedForward(width, ffn_hidden, conv_kernel=ffn_kernel)
        self.norm2 = LayerNorm(width)

    def forward(self, x):
        x = self.conv(x)
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ffn(x))


class PhonemeEncoder(nn.Module):
    def __init__(self, cfg: TextConfig):
        super().__init__()
        self.embed = Embedding(cfg.vocab, cfg.width)
        self.blocks = nn.ModuleList(
            EncoderBlock(cfg.width, cfg.heads, cfg.conv_kernel, cfg.ffn_hidden, cfg.ffn_kernel)
            for _ in range(cfg.blocks))

    def forward(self, ids):
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x)
        return x

    def example_inputs(self, input_length):
        return (torch.zeros(input_length, dtype=torch.long),)


class AcousticExtractor(nn.Module):
    """(conv -> layer norm -> ReLU) x n, then a scalar head per phoneme."""

    def __init__(self, width, kernel, blocks):
        super().__init__()
        self.layers = nn.ModuleList()
        for _ in range(blocks):
            self.layers.append(Conv1d(width, width, kernel))
            self.layers.append(LayerNorm(width))
        self.head = Linear(width, 1)

    def forward(self, x):
        for i in range(0, len(self.layers), 2):
            x = F.relu(self.layers[i + 1](self.layers[i](x)))
        return self.head(x).squeeze(-1)


@dataclass
class AcousticPrediction:
    energy: torch.Tensor
    pitch: torch.Tensor
    log_duration: torch.Tensor  # raw duration head output
    duration: torch.Tensor      # exp + clamp, latent frames


def length_regulate(features: torch.Tensor, durations) -> torch.Tensor:
    """Repeat row ``i`` of ``features`` ``round(durations[i])`` times."""
    counts = torch.as_tensor(durations, dtype=DTYPE).round().clamp(min=0).long()
    if counts.shape[0] != features.shape[0]:
        raise InputError(f"{features.shape[0]} feature rows but {counts.shape[0]} durations")
    if int(counts.sum()) == 0:
        raise InputError("length regulation produced zero columns")
    return features.repeat_interleave(counts.to(features.device), dim=0)


def fit_length(cond: torch.Tensor, target_l: int) -> torch.Tensor:
    """Truncate or zero-pad along time to exactly ``target_l`` columns."""
    if cond.shape[0] >= target_l:
        return cond[:target_l]
    pad = cond.new_zeros(target_l - cond.shape[0], cond.shape[1])
    return torch.cat([cond, pad], dim=0)


class TextFrontend(nn.Module):
    """Phoneme ids -> (condition columns ``[l, cond_width]``, acoustic predictions)."""

    def __init__(self, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = PhonemeEncoder(cfg)
        self.energy = AcousticExtractor(cfg.width, cfg.extractor_kernel, cfg.extractor_blocks)
        self.pitch = AcousticExtractor(cfg.width, cfg.extractor_kernel, cfg.extractor_blocks)
        self.duration = AcousticExtractor(cfg.width, cfg.extractor_kernel, cfg.extractor_blocks)
        self.project = Linear(cfg.width + 3, cfg.cond_width)

    def encode(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        return self.encoder(ids)

    def acoustic(self, content: torch.Tensor) -> AcousticPrediction:
        # the three extractors read the same content, never each other's output
        raw_d = self.duration(content)
        return AcousticPrediction(
            energy=self.energy(content),
            pitch=self.pitch(content),
            log_duration=raw_d,
            duration=torch.exp(raw_d).clamp(1.0, self.cfg.max_duration),
        )

    def build_condition(self, content, energy, pitch, duration, target_l: Optional[int] = None):
        feats = torch.cat([content, energy[:, None], pitch[:, None], duration[:, None]], dim=-1)
        expanded = length_regulate(feats, duration.detach())
        cond = self.project(expanded)
        if target_l is not None:
            cond = fit_length(cond, target_l)
        return cond

    def forward(self, ids, targets: Optional["AcousticTargets"] = None, target_l: Optional[int] = None):
        """Teacher-forced with ``targets`` (training), predicted otherwise (inference)."""
        content = self.encode(ids)
        pred = self.acoustic(content)
        if targets is not None:
            cond = self.build_condition(content, targets.energy_t, targets.pitch_t,
                                        targets.duration_t, target_l)
        else:
            cond = self.build_condition(content, pred.energy, pred.pitch,
                                        pred.duration.round(), target_l)
        return cond, pred

    def example_inputs(self, input_length):
        return (torch.zeros(input_length, dtype=torch.long),)


def pooled(cond: torch.Tensor) -> torch.Tensor:
    """Mean over time columns."""
    return cond.mean(dim=-2)


# ---------------------------------------------------------------------------
# acoustic targets
# ---------------------------------------------------------------------------

@dataclass
class AcousticStats:
    energy_mean: float = 0.0
    energy_std: float = 1.0
    pitch_mean: float = 0.0
    pitch_std: float = 1.0

    @classmethod
    def from_config(cls, cfg) -> "AcousticStats":
        return cls(*(float(cfg.get(f"stats.{k}", d)) for k, d in
                     (("energy_mean", 0.0), ("energy_std", 1.0), ("pitch_mean", 0.0), ("pitch_std", 1.0))))

    def to_config(self) -> Dict[str, float]:
        return {f"stats.{k}": float(v) for k, v in self.__dict__.items()}


@dataclass
class AcousticTargets:
    log_energy: np.ndarray   # raw log-RMS per phoneme
    log_pitch: np.ndarray    # raw log-Hz per phoneme (0 where unvoiced)
    voiced: np.ndarray       # bool per phoneme
    duration: np.ndarray     # latent frames per phoneme
    stats: AcousticStats = field(default_factory=AcousticStats)

    @property
    def energy(self) -> np.ndarray:
        return (self.log_energy - self.stats.energy_mean) / self.stats.energy_std

    @property
    def pitch(self) -> np.ndarray:
        p = (self.log_pitch - self.stats.pitch_mean) / self.stats.pitch_std
        return np.where(self.voiced, p, 0.0)

    # tensors used for teacher forcing
    @property
    def energy_t(self):
        return torch.as_tensor(self.energy, dtype=DTYPE)

    @property
    def pitch_t(self):
        return torch.as_tensor(self.pitch, dtype=DTYPE)

    @property
    def duration_t(self):
        return torch.as_tensor(self.duration, dtype=DTYPE)

    def with_stats(self, stats: AcousticStats) -> "AcousticTargets":
        return AcousticTargets(self.log_energy, self.log_pitch, self.voiced, self.duration, stats)


def autocorrelation_pitch(x: np.ndarray, sample_rate: int, fmin: float = 60.0, fmax: float = 4000.0,
                          threshold: float = 0.3) -> Tuple[float, bool]:
    """f0 from the first major autocorrelation peak; ``(0, False)`` when unvoiced."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    if n < 4 or np.sum(x * x) < 1e-10:
        return 0.0, False
    spec = np.fft.rfft(x, 2 * n)
    r = np.fft.irfft(np.abs(spec) ** 2)[:n]
    lag_min = max(1, int(np.floor(sample_rate / fmax)))
    lag_max = min(n - 2, int(np.ceil(sample_rate / fmin)))
    negative = np.flatnonzero(r[1:] < 0)
    if len(negative) == 0 or lag_min >= lag_max:
        return 0.0, False
    start = max(lag_min, negative[0] + 1)
    if start >= lag_max:
        return 0.0, False
    lag = start + int(np.argmax(r[start:lag_max + 1]))
    if r[lag] / r[0] < threshold:
        return 0.0, False
    # parabolic refinement of the peak position
    shift = 0.0
    if 0 < lag < n - 1:
        a, b, c = r[lag - 1], r[lag], r[lag + 1]
        denom = a - 2 * b + c
        if denom < 0:
            shift = 0.5 * (a - c) / denom
    return sample_rate / (lag + shift), True


def acoustic_targets(mel_values: np.ndarray, samples: np.ndarray, spans: Sequence[Tuple[int, int]],
                     params: AudioParams = AudioParams(), stats: Optional[AcousticStats] = None,
                     time_factor: int = 2) -> AcousticTargets:
    """Per-phoneme log-energy, log-pitch and latent duration from aligned audio.

    ``spans`` are ``[start, end)`` mel-frame ranges that must tile ``[0, L)``
    or ``[0, L-1)``; in the latter case the last span also owns the trailing
    centred frame.
    """
    frames = mel_values.shape[1]
    spans = [(int(a), int(b)) for a, b in spans]
    if not spans or spans[0][0] != 0 or any(spans[i][1] != spans[i + 1][0] for i in range(len(spans) - 1)):
        raise InputError("alignment spans must be contiguous and start at frame 0")
    if any(b <= a for a, b in spans):
        raise InputError("alignment spans must be non-empty")
    end = spans[-1][1]
    if end not in (frames, frames - 1):
        raise InputError(f"alignment covers {end} frames but mel has {frames}")
    mag = np.exp(denormalize_log_mel(mel_values, params))
    log_e, log_p, voiced, dur = [], [], [], []
    for i, (a, b) in enumerate(spans):
        stop = frames if i == len(spans) - 1 else b
        rms = np.sqrt(np.mean(mag[:, a:stop] ** 2))
        log_e.append(max(np.log(max(rms, 1e-300)), params.log_min))
        seg = samples[a * params.hop_length:b * params.hop_length]
        f0, v = autocorrelation_pitch(seg, params.sample_rate)
        log_p.append(np.log(f0) if v else 0.0)
        voiced.append(v)
        dur.append((b - a) / time_factor)
    return AcousticTargets(np.array(log_e), np.array(log_p), np.array(voiced, dtype=bool),
                           np.array(dur), stats or AcousticStats())


def fit_stats(targets: Sequence[AcousticTargets]) -> AcousticStats:
    e = np.concatenate([t.log_energy for t in targets])
    p = np.concatenate([t.log_pitch[t.voiced] for t in targets])
    return AcousticStats(float(e.mean()), float(e.std() or 1.0),
                         float(p.mean()) if len(p) else 0.0, float(p.std() or 1.0) if len(p) else 1.0)


def acoustic_loss(pred: AcousticPrediction, targets: AcousticTargets) -> Dict[str, torch.Tensor]:
    """MSE on normalised energy/pitch (voiced only) and on log duration."""
    e = torch.mean((pred.energy - targets.energy_t) ** 2)
    voiced = torch.as_tensor(targets.voiced)
    if voiced.any():
        p = torch.mean((pred.pitch[voiced] - targets.pitch_t[voiced]) ** 2)
    else:
        p = pred.pitch.sum() * 0.0
    d = torch.mean((pred.log_duration - torch.log(targets.duration_t)) ** 2)
    return {"energy": e, "pitch": p, "duration": d}
