"""Synthetic sine-phoneme corpus with exactly known alignments."""

import json
import logging
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audio import AudioParams, Waveform
from .errors import ConfigError, InputError
from .io import read_wav, write_wav
from .text import WORD_BOUNDARY, G2P, default_g2p

logger = logging.getLogger(__name__)


@dataclass
class PhonemeRule:
    freq: float
    amp: float
    frames: int


# Twelve symbols: six vowels and six consonants, all sine tones.
TOY_PHONEMES: Dict[str, PhonemeRule] = {
    "AA": PhonemeRule(300.0, 0.45, 14),
    "AE": PhonemeRule(400.0, 0.45, 12),
    "EH": PhonemeRule(500.0, 0.40, 12),
    "IY": PhonemeRule(650.0, 0.40, 16),
    "OW": PhonemeRule(800.0, 0.40, 14),
    "UW": PhonemeRule(950.0, 0.40, 16),
    "M": PhonemeRule(180.0, 0.35, 8),
    "N": PhonemeRule(220.0, 0.35, 8),
    "L": PhonemeRule(1200.0, 0.30, 8),
    "R": PhonemeRule(1800.0, 0.30, 8),
    "K": PhonemeRule(2400.0, 0.30, 6),
    "S": PhonemeRule(3000.0, 0.30, 10),
}


@dataclass
class ToyCorpusSpec:
    phonemes: Dict[str, PhonemeRule]
    utterances: List[str]
    held_out: int = 5
    boundary_frames: int = 4
    crossfade_ms: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if not self.utterances:
            raise ConfigError("toy corpus needs at least one utterance")
        if not 0 <= self.held_out < len(self.utterances):
            raise ConfigError(f"held_out={self.held_out} must be below {len(self.utterances)} utterances")
        for sym, rule in self.phonemes.items():
            if rule.frames < 4:
                raise ConfigError(f"phoneme {sym} lasts {rule.frames} frames, minimum is 4")
            if not 80.0 <= rule.freq <= 4000.0:
                raise ConfigError(f"phoneme {sym} frequency {rule.freq} Hz outside [80, 4000]")
        if self.boundary_frames < 1:
            raise ConfigError("boundary_frames must be positive")

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ToyCorpusSpec":
        try:
            d = json.loads(text)
            d["phonemes"] = {k: PhonemeRule(**v) for k, v in d["phonemes"].items()}
            spec = cls(**d)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed corpus spec: {exc}") from exc
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> "ToyCorpusSpec":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class Utterance:
    text: str
    phonemes: List[str]
    spans: List[Tuple[int, int]]
    waveform: Waveform
    split: str = "train"

    @property
    def frames(self) -> int:
        return self.spans[-1][1]


@dataclass
class ToyCorpus:
    spec: ToyCorpusSpec
    utterances: List[Utterance] = field(default_factory=list)

    @property
    def train(self) -> List[Utterance]:
        return [u for u in self.utterances if u.split == "train"]

    @property
    def test(self) -> List[Utterance]:
        return [u for u in self.utterances if u.split == "test"]


def word_frames(phones: Sequence[str], rules: Dict[str, PhonemeRule]) -> Optional[int]:
    if any(p not in rules for p in phones):
        return None
    return sum(rules[p].frames for p in phones)


def default_spec(seed: int = 0, n_train: int = 20, n_test: int = 5, frames: int = 62,
                 g2p: Optional[G2P] = None) -> ToyCorpusSpec:
    """Two-word phrases of exactly ``frames`` mel frames drawn from the toy-compatible lexicon.

    Held-out phrases only use words that also occur in training phrases.
    """
    g2p = g2p or default_g2p()
    rules = TOY_PHONEMES
    words = sorted(w.lower() for w, ph in g2p.lexicon.items() if word_frames(ph, rules) is not None)
    lens = {w: word_frames(g2p.lexicon[w.upper()], rules) for w in words}
    phrases = [f"{a} {b}" for a, b in product(words, words)
               if a != b and lens[a] + lens[b] + 4 == frames]
    rng = np.random.default_rng(seed)
    order = [phrases[i] for i in rng.permutation(len(phrases))]
    train: List[str] = []
    used_words: Dict[str, int] = {}
    for p in order:
        a, b = p.split()
        # spread vocabulary: each word appears at most twice in training
        if used_words.get(a, 0) < 2 and used_words.get(b, 0) < 2 and f"{b} {a}" not in train:
            train.append(p)
            used_words[a] = used_words.get(a, 0) + 1
            used_words[b] = used_words.get(b, 0) + 1
        if len(train) == n_train:
            break
    test = [p for p in order if p not in train and f"{p.split()[1]} {p.split()[0]}" not in train
            and all(w in used_words for w in p.split())][:n_test]
    if len(train) < n_train or len(test) < n_test:
        raise ConfigError(f"only {len(train)}+{len(test)} phrases of {frames} frames available")
    return ToyCorpusSpec(phonemes=dict(rules), utterances=train + test, held_out=n_test, seed=seed)


def _segment(n: int, freq: float, amp: float, phase: float, sr: int) -> np.ndarray:
    return amp * np.sin(2.0 * np.pi * freq * np.arange(n) / sr + phase)


def synthesize_utterance(phones: Sequence[str], spec: ToyCorpusSpec, params: AudioParams,
                         rng: np.random.Generator) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """Sine segments joined by linear crossfades centred on the segment boundaries."""
    hop, sr = params.hop_length, params.sample_rate
    spans, pos = [], 0
    for p in phones:
        n = spec.boundary_frames if p == WORD_BOUNDARY else spec.phonemes[p].frames
        spans.append((pos, pos + n))
        pos += n
    total = pos * hop
    x = np.zeros(total)
    fade = max(2, int(round(spec.crossfade_ms * 1e-3 * sr)))
    half = fade // 2
    for p, (a, b) in zip(phones, spans):
        phase = rng.uniform(0.0, 2.0 * np.pi)
        if p == WORD_BOUNDARY:
            continue
        rule = spec.phonemes[p]
        lo = max(0, a * hop - half)
        hi = min(total, b * hop + half)
        seg = _segment(hi - lo, rule.freq, rule.amp, phase, sr)
        env = np.ones(hi - lo)
        if lo > 0:
            env[:fade] = np.linspace(0.0, 1.0, fade)
        if hi < total:
            env[-fade:] = np.linspace(1.0, 0.0, fade)
        x[lo:hi] += seg * env
    return x, spans


def generate_toy_corpus(spec: ToyCorpusSpec, params: AudioParams = AudioParams(),
                        g2p: Optional[G2P] = None) -> ToyCorpus:
    spec.validate()
    g2p = g2p or default_g2p()
    rng = np.random.default_rng(spec.seed)
    corpus = ToyCorpus(spec)
    n_train = len(spec.utterances) - spec.held_out
    for i, text in enumerate(spec.utterances):
        phones = g2p(text).symbols
        missing = [p for p in phones if p != WORD_BOUNDARY and p not in spec.phonemes]
        if missing:
            raise InputError(f"utterance {text!r} uses phonemes without synthesis rules: {missing}")
        samples, spans = synthesize_utterance(phones, spec, params, rng)
        corpus.utterances.append(Utterance(text, list(phones), spans, Waveform(samples, params.sample_rate),
                                           "train" if i < n_train else "test"))
    return corpus


def save_corpus(corpus: ToyCorpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    meta = {"spec": json.loads(corpus.spec.to_json()), "utterances": []}
    for i, u in enumerate(corpus.utterances):
        name = f"wav/{i:03d}.wav"
        write_wav(out / name, u.waveform.samples, u.waveform.sample_rate)
        meta["utterances"].append({"text": u.text, "phonemes": u.phonemes,
                                   "spans": [list(s) for s in u.spans], "split": u.split, "wav": name})
    (out / "corpus.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return out


def load_corpus(path) -> ToyCorpus:
    root = Path(path)
    index = root / "corpus.json"
    if not index.exists():
        raise ConfigError(f"no corpus.json in {root}")
    meta = json.loads(index.read_text(encoding="utf-8"))
    spec = ToyCorpusSpec.from_json(json.dumps(meta["spec"]))
    corpus = ToyCorpus(spec)
    for entry in meta["utterances"]:
        samples, sr = read_wav(root / entry["wav"])
        corpus.utterances.append(Utterance(entry["text"], entry["phonemes"],
                                           [tuple(s) for s in entry["spans"]],
                                           Waveform(samples, sr), entry["split"]))
    return corpus
