"""Conditional transformer mapping ``(x_t, t, condition)`` to x0-logits."""

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError
from .substrate import (DTYPE, AdaptiveLayerNorm, Embedding, FeedForward, LayerNorm, Linear,
                        MultiHeadSelfAttention)


@dataclass
class DenoiserConfig:
    K: int = 128
    layers: int = 12
    heads: int = 8
    width: int = 128
    ffn_mult: int = 4
    max_positions: int = 1024
    f: int = 4
    conditional: bool = True

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"denoiser needs at least one layer, got {self.layers}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")

    @classmethod
    def from_config(cls, cfg, f: int = 4, conditional: bool = True) -> "DenoiserConfig":
        return cls(K=cfg["vq.K"], layers=cfg["denoiser.layers"], heads=cfg["denoiser.heads"],
                   width=cfg["denoiser.width"], ffn_mult=cfg["denoiser.ffn_mult"],
                   max_positions=cfg["denoiser.max_positions"], f=f, conditional=conditional)


def sinusoidal_embedding(t: torch.Tensor, width: int) -> torch.Tensor:
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1))
    args = t.to(DTYPE)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if width % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimestepEmbedding(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.fc1 = Linear(width, width)
        self.fc2 = Linear(width, width)

    def forward(self, t):
        return self.fc2(F.silu(self.fc1(sinusoidal_embedding(t, self.width))))


class DenoiserBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        w = cfg.width
        self.norm1 = AdaptiveLayerNorm(w, w)
        self.attn = MultiHeadSelfAttention(w, cfg.heads)
        self.fuse = Linear(2 * w, w) if cfg.conditional else None
        self.norm2 = LayerNorm(w)
        self.ffn = FeedForward(w, cfg.ffn_mult * w)

    def forward(self, h, temb, cond_cols=None):
        h = h + self.attn(self.norm1(h, temb))
        if self.fuse is not None:
            h = h + self.fuse(torch.cat([h, cond_cols], dim=-1))
        return h + self.ffn(self.norm2(h))


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        self.token_embed = Embedding(cfg.K + 1, cfg.width)  # +1 for MASK
        self.position_embed = Embedding(cfg.max_positions, cfg.width)
        self.time_embed = TimestepEmbedding(cfg.width)
        self.blocks = nn.ModuleList(DenoiserBlock(cfg) for _ in range(cfg.layers))
        self.final_norm = LayerNorm(cfg.width)
        self.head = Linear(cfg.width, cfg.K)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: Optional[torch.Tensor] = None):
        """``x_t [B, N]``, ``t [B]``, ``cond [B, l, width]`` -> logits ``[B, N, K]``."""
        if x_t.dim() == 1:
            x_t = x_t.unsqueeze(0)
        b, n = x_t.shape
        if n > self.cfg.max_positions:
            raise InputError(f"sequence length {n} exceeds max_positions {self.cfg.max_positions}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(b)
        cond_cols = None
        if self.cfg.conditional:
            if cond is None:
                raise InputError("conditional denoiser called without condition features")
            if cond.dim() == 2:
                cond = cond.unsqueeze(0)
            if n % self.cfg.f or n // self.cfg.f != cond.shape[1]:
                raise InputError(f"token length {n} incompatible with {cond.shape[1]} condition "
                                 f"columns at f={self.cfg.f}")
            cond_cols = cond.repeat_interleave(self.cfg.f, dim=1)
        pos = torch.arange(n)
        h = self.token_embed(x_t) + self.position_embed(pos)[None]
        temb = self.time_embed(t)
        for block in self.blocks:
            h = block(h, temb, cond_cols)
        return self.head(self.final_norm(h))

    def check_finite(self):
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise NumericError(f"non-finite values in denoiser parameter {name!r}")

    def example_inputs(self, input_length: int):
        n = input_length - input_length % self.cfg.f if self.cfg.conditional else input_length
        x = torch.full((1, n), self.cfg.K, dtype=torch.long)
        t = torch.ones(1, dtype=torch.long)
        cond = torch.zeros(1, n // self.cfg.f, self.cfg.width, dtype=DTYPE) if self.cfg.conditional else None
        return x, t, cond


def denoise_logits(model: Denoiser, x_t, t, cond=None) -> torch.Tensor:
    return model(x_t, t, cond)
