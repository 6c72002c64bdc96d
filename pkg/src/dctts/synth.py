"""Text -> condition -> token sampling -> VQ decode -> Griffin-Lim."""

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .audio import AudioParams, MelSpectrogram, Waveform, griffin_lim
from .config import Config
from .diffusion import sample
from .errors import InputError
from .io import save_tensor, save_tokens, write_wav
from .text import PhonemeSequence, default_g2p
from .train import Stage2Models, load_run_config, load_stage2, load_vq
from .vq import SpectrogramVQ, unflatten_tokens


@dataclass
class SynthesisResult:
    text: str
    phonemes: PhonemeSequence
    tokens: torch.Tensor        # grid [f, l]
    mel: MelSpectrogram
    waveform: Optional[Waveform] = None

    @property
    def audio_seconds(self) -> float:
        return self.mel.frames * self.mel.hop_length / AudioParams().sample_rate

    def save(self, wav_path, K: int) -> List[Path]:
        """Write the waveform plus ``.mel`` tensor and ``.tok`` token files beside it."""
        wav_path = Path(wav_path)
        wav_path.parent.mkdir(parents=True, exist_ok=True)
        written = []
        if self.waveform is not None:
            write_wav(wav_path, self.waveform.samples, self.waveform.sample_rate)
            written.append(wav_path)
        mel_path = wav_path.with_suffix(".mel")
        save_tensor(mel_path, self.mel.values)
        tok_path = wav_path.with_suffix(".tok")
        f, l = self.tokens.shape
        save_tokens(tok_path, self.tokens.T.reshape(-1).numpy(), f, l, K)
        return written + [mel_path, tok_path]


class Synthesizer:
    """Frozen models loaded from a run directory."""

    def __init__(self, cfg: Config, vq: SpectrogramVQ, models: Stage2Models):
        self.cfg = cfg
        self.vq = vq
        self.models = models
        self.params = AudioParams.from_config(cfg)
        self.g2p = default_g2p()

    @classmethod
    def from_run(cls, run_dir, cfg: Optional[Config] = None) -> "Synthesizer":
        cfg = load_run_config(run_dir, cfg)
        vq = load_vq(run_dir, cfg)
        models = load_stage2(run_dir, cfg, vq.cfg.f)
        return cls(cfg, vq, models)

    @property
    def f(self) -> int:
        return self.vq.cfg.f

    def condition(self, text: str, cond_override: Optional[torch.Tensor] = None):
        seq = self.g2p(text)
        with torch.no_grad():
            cond, pred = self.models.frontend(seq.ids)
        if cond_override is not None:
            cond = cond_override
        return seq, cond

    def sample_tokens(self, cond: torch.Tensor, steps: int, seed: int) -> torch.Tensor:
        """Flat token sequence ``[N]`` for one condition ``[l, width]``."""
        l = cond.shape[0]
        n = l * self.f
        if n > self.models.denoiser.cfg.max_positions:
            raise InputError(f"text expands to {n} tokens, above max_positions "
                             f"{self.models.denoiser.cfg.max_positions}")
        c = cond[None]

        def denoise(x, t):
            return self.models.denoiser(x, t, c.expand(x.shape[0], -1, -1))

        with torch.no_grad():
            return sample(denoise, self.models.schedule, 1, n, steps, seed)[0]

    def generate_mel(self, text: str, steps: int = 100, seed: int = 0,
                     cond_override: Optional[torch.Tensor] = None) -> SynthesisResult:
        seq, cond = self.condition(text, cond_override)
        flat = self.sample_tokens(cond, steps, seed)
        if int(flat.max()) >= self.vq.cfg.K:
            raise InputError("sampler emitted a MASK token")
        grid = unflatten_tokens(flat, self.f)
        with torch.no_grad():
            mel = self.vq.decode(grid[None], frames=grid.shape[-1] * self.vq.cfg.time_factor)[0]
        p = self.params
        return SynthesisResult(text, seq, grid, MelSpectrogram(mel.numpy(), p.hop_length, p.win_length, p.n_fft))

    def synthesize(self, text: str, steps: int = 100, seed: int = 0,
                   iterations: Optional[int] = None) -> SynthesisResult:
        result = self.generate_mel(text, steps, seed)
        iters = iterations or self.cfg["audio.griffin_lim_iters"]
        result.waveform = griffin_lim(result.mel, iters, self.params)
        return result


def synthesize(text: str, run_dir, steps: int = 100, seed: int = 0) -> SynthesisResult:
    return Synthesizer.from_run(run_dir).synthesize(text, steps, seed)


def frame_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared difference per frame over the common frame range."""
    n = min(a.shape[1], b.shape[1])
    return float(np.mean((a[:, :n] - b[:, :n]) ** 2))
