"""Spectrogram vector-quantisation codec: conv encoder, codebook, conv decoder.

A normalised mel ``[80, L]`` is treated as a one-channel image and reduced by
20x in frequency and 2x in time to a grid of ``d``-dimensional latents, each of
which is snapped to its nearest codebook entry.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .substrate import DTYPE, LayerNorm


def _init_conv(conv: nn.Module) -> nn.Module:
    fan_in = conv.weight[0].numel() if isinstance(conv, nn.Conv2d) else conv.weight.shape[0] * \
        conv.weight[0, 0].numel()
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        conv.weight.uniform_(-bound, bound)
        conv.bias.zero_()
    return conv


def _time_kernel(stride: int):
    # (kernel, padding) keeping L -> L / stride exactly for stride in {1, 2}
    return (3, 1) if stride == 1 else (4, 1)


class _ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


@dataclass
class VQConfig:
    K: int = 128
    dim: int = 128
    n_mels: int = 80
    channels: Sequence[int] = (32, 64, 128)
    freq_strides: Sequence[int] = (5, 2, 2)
    time_strides: Sequence[int] = (1, 1, 2)
    commitment: float = 0.25

    @classmethod
    def from_config(cls, cfg) -> "VQConfig":
        return cls(K=cfg["vq.K"], dim=cfg["vq.dim"], n_mels=cfg["audio.n_mels"],
                   channels=tuple(cfg.ints("vq.channels")),
                   freq_strides=tuple(cfg.ints("vq.freq_strides")),
                   time_strides=tuple(cfg.ints("vq.time_strides")),
                   commitment=cfg["vq.commitment"])

    @property
    def freq_factor(self) -> int:
        return int(np.prod(self.freq_strides))

    @property
    def time_factor(self) -> int:
        return int(np.prod(self.time_strides))

    @property
    def f(self) -> int:
        return self.n_mels // self.freq_factor


class SpectrogramVQ(nn.Module):
    def __init__(self, cfg: VQConfig = VQConfig()):
        super().__init__()
        if cfg.K < 2 or cfg.dim < 1:
            raise ConfigError(f"codebook needs K >= 2 and d >= 1, got K={cfg.K}, d={cfg.dim}")
        if not (len(cfg.channels) == len(cfg.freq_strides) == len(cfg.time_strides)):
            raise ConfigError("vq.channels, vq.freq_strides and vq.time_strides must have equal length")
        if cfg.n_mels % cfg.freq_factor:
            raise ConfigError(f"{cfg.n_mels} mel channels not divisible by frequency factor {cfg.freq_factor}")
        self.cfg = cfg
        enc, cin = [], 1
        for cout, sf, st in zip(cfg.channels, cfg.freq_strides, cfg.time_strides):
            kt, pt = _time_kernel(st)
            enc += [_init_conv(nn.Conv2d(cin, cout, (sf, kt), (sf, st), (0, pt), dtype=DTYPE)),
                    _ChannelNorm(cout), nn.ReLU()]
            cin = cout
        enc.append(_init_conv(nn.Conv2d(cin, cfg.dim, 1, dtype=DTYPE)))
        self.encoder = nn.Sequential(*enc)

        dec = [_init_conv(nn.Conv2d(cfg.dim, cin, 1, dtype=DTYPE)), _ChannelNorm(cin), nn.ReLU()]
        stages = list(zip(cfg.channels, cfg.freq_strides, cfg.time_strides))[::-1]
        outs = [c for c, _, _ in stages][1:] + [1]
        for i, ((_, sf, st), cout) in enumerate(zip(stages, outs)):
            kt, pt = _time_kernel(st)
            dec.append(_init_conv(nn.ConvTranspose2d(cin, cout, (sf, kt), (sf, st), (0, pt), dtype=DTYPE)))
            if i < len(stages) - 1:
                dec += [_ChannelNorm(cout), nn.ReLU()]
            cin = cout
        self.decoder = nn.Sequential(*dec)

        self.codebook = nn.Parameter(torch.empty(cfg.K, cfg.dim, dtype=DTYPE))
        with torch.no_grad():
            self.codebook.uniform_(-1.0 / cfg.K, 1.0 / cfg.K)

    # -- shapes -------------------------------------------------------------
    def padded_frames(self, frames: int) -> int:
        tf = self.cfg.time_factor
        return -(-frames // tf) * tf

    def grid_length(self, frames: int) -> int:
        return self.padded_frames(frames) // self.cfg.time_factor

    # -- encode / quantise / decode ------------------------------------------
    def encode(self, mel: torch.Tensor) -> torch.Tensor:
        """``[B, F, L]`` mel -> latent ``[B, f, l, d]``; L is edge-padded to the time factor."""
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        if mel.shape[1] != self.cfg.n_mels:
            raise ConfigError(f"mel shape {tuple(mel.shape)} does not match {self.cfg.n_mels} channels")
        pad = self.padded_frames(mel.shape[-1]) - mel.shape[-1]
        if pad:
            mel = torch.cat([mel, mel[..., -1:].expand(*mel.shape[:-1], pad)], dim=-1)
        z = self.encoder(mel.unsqueeze(1))
        return z.permute(0, 2, 3, 1)

    def quantize(self, z: torch.Tensor):
        """Nearest codebook entry per cell (ties -> lowest index).

        Returns ``(indices, quantized)`` where ``quantized`` carries
        straight-through gradients to ``z``.
        """
        return quantize(z, self.codebook)

    def decode_latent(self, zq: torch.Tensor) -> torch.Tensor:
        return self.decoder(zq.permute(0, 3, 1, 2)).squeeze(1)

    def decode(self, indices: torch.Tensor, frames: Optional[int] = None) -> torch.Tensor:
        """Token grid ``[B, f, l]`` -> mel ``[B, F, frames]`` clamped to [-1, 1]."""
        if indices.dim() == 2:
            indices = indices.unsqueeze(0)
        if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= self.cfg.K):
            raise InputError(f"token indices must lie in [0, {self.cfg.K}), got "
                             f"[{int(indices.min())}, {int(indices.max())}]")
        mel = self.decode_latent(F.embedding(indices, self.codebook))
        if frames is not None:
            mel = mel[..., :frames]
        return mel.clamp(-1.0, 1.0)

    def tokenize(self, mel: torch.Tensor) -> torch.Tensor:
        """mel -> token grid ``[B, f, l]`` (inference)."""
        with torch.no_grad():
            return self.quantize(self.encode(mel))[0]

    def loss(self, mel: torch.Tensor) -> Dict[str, torch.Tensor]:
        """Reconstruction + codebook + weighted commitment terms."""
        if mel.dim() == 2:
            mel = mel.unsqueeze(0)
        z = self.encode(mel)
        idx, zq = self.quantize(z)
        recon = self.decode_latent(zq)[..., :mel.shape[-1]]
        codebook_target = F.embedding(idx, self.codebook)
        rec = torch.mean((recon - mel) ** 2)
        cb = torch.mean((z.detach() - codebook_target) ** 2)
        commit = torch.mean((z - codebook_target.detach()) ** 2)
        total = rec + cb + self.cfg.commitment * commit
        return {"total": total, "recon": rec, "codebook": cb, "commitment": commit,
                "indices": idx, "latent": z}

    def example_inputs(self, input_length: int):
        return (torch.zeros(1, self.cfg.n_mels, input_length, dtype=DTYPE),)

    def forward(self, mel):
        idx, zq = self.quantize(self.encode(mel))
        return self.decode_latent(zq)[..., :mel.shape[-1]]


def quantize(z: torch.Tensor, codebook: torch.Tensor):
    """Per-cell argmin of squared Euclidean distance to ``codebook`` rows."""
    if z.shape[-1] != codebook.shape[-1]:
        raise ConfigError(f"latent width {z.shape[-1]} does not match codebook shape {tuple(codebook.shape)}")
    flat = z.reshape(-1, z.shape[-1])
    with torch.no_grad():
        dist = ((flat.detach()[:, None, :] - codebook.detach()[None, :, :]) ** 2).sum(-1)
        idx = torch.argmin(dist, dim=1)
    zq = F.embedding(idx, codebook).reshape(z.shape)
    zq_st = z + (zq - z).detach()
    return idx.reshape(z.shape[:-1]), zq_st


def flatten_tokens(grid: torch.Tensor) -> torch.Tensor:
    """``[..., f, l]`` -> ``[..., l*f]`` with position ``p = t*f + i``."""
    return grid.transpose(-1, -2).reshape(*grid.shape[:-2], -1)


def unflatten_tokens(seq: torch.Tensor, f: int) -> torch.Tensor:
    """Inverse of :func:`flatten_tokens`."""
    if seq.shape[-1] % f:
        raise InputError(f"sequence length {seq.shape[-1]} not divisible by f={f}")
    l = seq.shape[-1] // f
    return seq.reshape(*seq.shape[:-1], l, f).transpose(-1, -2)


def reseed_dead_codes(vq: SpectrogramVQ, unused: torch.Tensor, used: torch.Tensor,
                      latents: torch.Tensor, patience: int, generator: torch.Generator) -> int:
    """Bump per-entry idle counters; entries idle for ``patience`` steps get a random latent.

    Returns the number of entries reseeded.
    """
    unused += 1
    unused[used] = 0
    dead = torch.nonzero(unused >= patience).flatten()
    if len(dead) == 0:
        return 0
    pool = latents.detach().reshape(-1, latents.shape[-1])
    pick = torch.randint(0, pool.shape[0], (len(dead),), generator=generator)
    with torch.no_grad():
        vq.codebook[dead] = pool[pick]
    unused[dead] = 0
    return len(dead)
