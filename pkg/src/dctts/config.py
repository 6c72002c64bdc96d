"""Flat ``key = value`` configuration with typed defaults."""

from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from .errors import ConfigError

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "corpus.dir": "",
    "run.dir": "",
    # audio front end
    "audio.sample_rate": 22050,
    "audio.n_fft": 1024,
    "audio.win_length": 1024,
    "audio.hop_length": 256,
    "audio.n_mels": 80,
    "audio.fmin": 0.0,
    "audio.fmax": 8000.0,
    "audio.log_floor": 1e-5,
    "audio.log_min": -11.5,
    "audio.log_max": 6.0,
    "audio.griffin_lim_iters": 32,
    # spectrogram VQ
    "vq.K": 128,
    "vq.dim": 128,
    "vq.channels": "32,64,128",
    "vq.freq_strides": "5,2,2",
    "vq.time_strides": "1,1,2",
    "vq.commitment": 0.25,
    "vq.dead_code_steps": 100,
    "vq.steps": 2000,
    "vq.batch_size": 4,
    "vq.base_lr": 1e-4,
    "vq.gpus": 1,
    # text encoder
    "text.width": 128,
    "text.heads": 2,
    "text.blocks": 2,
    "text.conv_kernel": 5,
    "text.ffn_hidden": 512,
    "text.ffn_kernel": 3,
    "text.extractor_kernel": 3,
    "text.extractor_blocks": 2,
    "text.acoustic_weight": 0.1,
    "text.max_duration": 64.0,
    # denoiser
    "denoiser.layers": 12,
    "denoiser.heads": 8,
    "denoiser.width": 128,
    "denoiser.ffn_mult": 4,
    "denoiser.max_positions": 1024,
    # diffusion chain
    "diffusion.T": 100,
    "diffusion.gamma_end": 0.9,
    "diffusion.beta_end": 0.1,
    "diffusion.mode": "cumulative",
    "diffusion.lambda_aux": 0.0,
    # contrastive loss
    "contrastive.lambda": 0.1,
    "contrastive.score": "sum",
    # stage-2 optimisation
    "train.batch_size": 4,
    "train.steps": 1000,
    "train.lr": 2e-4,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.checkpoint_every": 0,
    "train.grad_clip": 0.0,
    # synthesis
    "synth.steps": 100,
}

# Desk-scale settings used by the toy corpus runs and the acceptance suite.
TOY_OVERRIDES: Dict[str, Any] = {
    "vq.K": 32,
    "vq.dim": 32,
    "vq.channels": "16,32,32",
    "vq.steps": 400,
    "vq.batch_size": 4,
    "vq.base_lr": 5e-4,
    "vq.dead_code_steps": 50,
    "text.width": 48,
    "text.ffn_hidden": 96,
    "denoiser.layers": 3,
    "denoiser.heads": 4,
    "denoiser.width": 48,
    "denoiser.ffn_mult": 2,
    "denoiser.max_positions": 256,
    "train.steps": 1000,
    "train.lr": 1e-3,
    "contrastive.score": "mean",
}

# Keys written by training (corpus normalisation statistics etc.).
FREE_PREFIXES = ("stats.", "run.")


def _parse(key: str, text: str, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {text!r} as {type(default).__name__}") from exc
    return text


class Config(dict):
    """Dictionary of settings; unknown keys are rejected."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None, **kw):
        super().__init__(DEFAULTS)
        self.update_checked(values or {})
        self.update_checked(kw)

    def update_checked(self, values: Mapping[str, Any]) -> "Config":
        for key, value in values.items():
            if key not in DEFAULTS and not key.startswith(FREE_PREFIXES):
                raise ConfigError(f"unknown config key {key!r}")
            if key in DEFAULTS and isinstance(value, str) and not isinstance(DEFAULTS[key], str):
                value = _parse(key, value, DEFAULTS[key])
            elif key.startswith("stats.") and isinstance(value, str):
                value = float(value)
            self[key] = value
        return self

    def copy(self) -> "Config":
        return Config(dict(self))

    def with_overrides(self, **kw) -> "Config":
        c = self.copy()
        c.update_checked({k.replace("__", "."): v for k, v in kw.items()})
        return c

    def ints(self, key: str):
        return [int(v) for v in str(self[key]).split(",") if v.strip()]

    @classmethod
    def toy(cls, overrides: Optional[Mapping[str, Any]] = None) -> "Config":
        c = cls(TOY_OVERRIDES)
        c.update_checked(overrides or {})
        return c

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values = {}
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls(values)

    def save(self, path) -> None:
        lines = [f"{k} = {v}" for k, v in self.items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
