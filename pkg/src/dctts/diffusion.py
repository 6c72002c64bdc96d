"""Mask-and-replace discrete diffusion over codebook tokens.

Token values are ``0..K-1`` plus an absorbing ``MASK = K``. At step ``t`` a
non-mask token is kept with probability ``alpha[t]``, resampled uniformly over
the ``K`` classes with total probability ``K * beta[t]`` and masked with
probability ``gamma[t]``. The chain is closed under composition, so every span
``s -> t`` is again a mask-and-replace kernel with
``alpha = alpha_bar[t] / alpha_bar[s]`` and
``1 - gamma = (1 - gamma_bar[t]) / (1 - gamma_bar[s])``.
"""

import csv
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError
from .rng import counter_uniform, derive_seed


@dataclass
class NoiseSchedule:
    """Per-step and cumulative probabilities, indexed ``0..T`` (index 0 = identity)."""

    T: int
    K: int
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    alpha_bar: np.ndarray
    beta_bar: np.ndarray
    gamma_bar: np.ndarray

    @property
    def mask(self) -> int:
        return self.K

    def span(self, s: int, t: int):
        """``(alpha, beta, gamma)`` of the composed kernel from step ``s`` to ``t`` (s < t)."""
        ab_s, ab_t = self.alpha_bar[s], self.alpha_bar[t]
        alpha = ab_t / ab_s if ab_s > 0 else 0.0
        gamma = 1.0 - (1.0 - self.gamma_bar[t]) / (1.0 - self.gamma_bar[s])
        beta = (1.0 - alpha - gamma) / self.K
        return alpha, beta, gamma

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar"])
            names = ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar")
            for t in range(1, self.T + 1):
                w.writerow([t] + [repr(float(getattr(self, k)[t])) for k in names])


def _validate(s: NoiseSchedule) -> NoiseSchedule:
    for name in ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar"):
        arr = getattr(s, name)
        if np.any(arr < -1e-15) or np.any(arr > 1 + 1e-15) or not np.all(np.isfinite(arr)):
            raise ConfigError(f"schedule {name} leaves [0, 1]: {arr}")
        np.clip(arr, 0.0, 1.0, out=arr)
    return s


def build_linear_schedule(T: int, K: int, gamma_end: float = 0.9, beta_end: float = 0.1,
                          mode: str = "cumulative") -> NoiseSchedule:
    """Linear mask-and-replace schedule.

    ``mode="cumulative"`` ramps ``gamma_bar`` and ``K * beta_bar`` linearly to
    their end values and recovers the per-step kernel; ``mode="per_step"``
    ramps the per-step ``gamma`` and ``K * beta`` instead.
    """
    if T < 1 or K < 2:
        raise ConfigError(f"need T >= 1 and K >= 2, got T={T}, K={K}")
    if gamma_end < 0 or beta_end < 0 or gamma_end + beta_end > 1:
        raise ConfigError(f"end probabilities gamma={gamma_end}, K*beta={beta_end} must be >= 0 "
                          f"and sum to at most 1")
    frac = np.arange(T + 1, dtype=np.float64) / T
    if mode == "cumulative":
        gamma_bar = gamma_end * frac
        beta_bar = beta_end * frac / K
        alpha_bar = np.maximum(1.0 - (gamma_end + beta_end) * frac, 0.0)
        alpha = np.ones(T + 1)
        gamma = np.zeros(T + 1)
        prev = alpha_bar[:-1]
        alpha[1:] = np.divide(alpha_bar[1:], prev, out=np.zeros(T), where=prev > 0)
        gamma[1:] = (gamma_bar[1:] - gamma_bar[:-1]) / (1.0 - gamma_bar[:-1])
        beta = (1.0 - alpha - gamma) / K
        beta[0] = 0.0
    elif mode == "per_step":
        gamma = gamma_end * frac
        beta = beta_end * frac / K
        alpha = 1.0 - gamma - K * beta
        alpha_bar = np.cumprod(alpha)
        gamma_bar = 1.0 - np.cumprod(1.0 - gamma)
        beta_bar = (1.0 - alpha_bar - gamma_bar) / K
    else:
        raise ConfigError(f"unknown schedule mode {mode!r}")
    return _validate(NoiseSchedule(T, K, alpha, beta, gamma, alpha_bar, beta_bar, gamma_bar))


def schedule_from_config(cfg, K: Optional[int] = None) -> NoiseSchedule:
    return build_linear_schedule(cfg["diffusion.T"], K or cfg["vq.K"], cfg["diffusion.gamma_end"],
                                 cfg["diffusion.beta_end"], cfg["diffusion.mode"])


# ---------------------------------------------------------------------------
# exact single-token kernels (float64 numpy)
# ---------------------------------------------------------------------------

def _check_t(s: NoiseSchedule, t: int, lo: int = 1):
    if not lo <= t <= s.T:
        raise InputError(f"timestep {t} outside [{lo}, {s.T}]")


def transition_matrix(s: NoiseSchedule, t: int) -> np.ndarray:
    """``M[i, j] = P(x_t = i | x_{t-1} = j)``, shape ``(K+1, K+1)``."""
    _check_t(s, t)
    K = s.K
    M = np.full((K + 1, K + 1), s.beta[t])
    M[np.arange(K), np.arange(K)] += s.alpha[t]
    M[K, :] = s.gamma[t]
    M[:, K] = 0.0
    M[K, K] = 1.0
    return M


def q_xt_given_x0(s: NoiseSchedule, t: int, x0: int) -> np.ndarray:
    _check_t(s, t, lo=0)
    if not 0 <= x0 < s.K:
        raise InputError(f"x0 must be a non-mask token in [0, {s.K}), got {x0}")
    p = np.full(s.K + 1, s.beta_bar[t])
    p[x0] += s.alpha_bar[t]
    p[s.K] = s.gamma_bar[t]
    return p


def _span_row(s: NoiseSchedule, src: int, dst: int, x_dst: int) -> np.ndarray:
    """``P(x_dst | x_src = v)`` for every ``v``."""
    alpha, beta, gamma = s.span(src, dst)
    K = s.K
    if x_dst == K:
        row = np.full(K + 1, gamma)
        row[K] = 1.0
    else:
        row = np.full(K + 1, beta)
        row[x_dst] += alpha
        row[K] = 0.0
    return row


def true_posterior(s: NoiseSchedule, t: int, x_t: int, x0: int, prev: Optional[int] = None) -> np.ndarray:
    """``q(x_prev | x_t, x0)`` by Bayes over the chain (``prev`` defaults to ``t - 1``)."""
    _check_t(s, t)
    prev = t - 1 if prev is None else prev
    if not 0 <= prev < t:
        raise InputError(f"previous step {prev} must lie in [0, {t})")
    if not 0 <= x0 < s.K:
        raise InputError(f"x0 must be a non-mask token, got {x0}")
    num = _span_row(s, prev, t, x_t) * q_xt_given_x0(s, prev, x0)
    z = num.sum()
    if z <= 0:
        raise InputError(f"impossible pair (x_t={x_t}, x0={x0}) at t={t}")
    return num / z


def reverse_from_x0_probs(s: NoiseSchedule, t: int, x_t: int, x0_probs: np.ndarray,
                          prev: Optional[int] = None) -> np.ndarray:
    """``sum_x0 q(x_prev | x_t, x0) p(x0)`` for one position (reference implementation)."""
    out = np.zeros(s.K + 1)
    for x0, w in enumerate(x0_probs):
        if w > 0:
            out += w * true_posterior(s, t, x_t, x0, prev)
    return out


# ---------------------------------------------------------------------------
# batched torch kernels used by training and sampling
# ---------------------------------------------------------------------------

def _col(values, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(np.asarray(values), dtype=like.dtype)[t.long().cpu()]
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def q_probs(s: NoiseSchedule, t: torch.Tensor, x0: torch.Tensor, dtype=torch.float64) -> torch.Tensor:
    """``q(x_t | x0)`` for every position: ``[B, N] -> [B, N, K+1]``."""
    ref = torch.empty(x0.shape, dtype=dtype)
    ab, bb, gb = (_col(a, t, ref) for a in (s.alpha_bar, s.beta_bar, s.gamma_bar))
    p = F.one_hot(x0, s.K + 1).to(dtype) * ab[..., None] + bb[..., None]
    p[..., s.K] = gb.expand_as(p[..., s.K])
    return p


def posterior_probs(s: NoiseSchedule, t: torch.Tensor, x_t: torch.Tensor, x0_probs: torch.Tensor,
                    prev: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``p(x_prev | x_t) = sum_x0 q(x_prev | x_t, x0) p(x0)``.

    Args:
        t: ``[B]`` current steps (>= 1).
        x_t: ``[B, N]`` tokens (may contain MASK).
        x0_probs: ``[B, N, K]`` distribution over clean tokens.
        prev: ``[B]`` target steps (< t); defaults to ``t - 1``.

    Returns:
        ``[B, N, K+1]`` probabilities.
    """
    K = s.K
    prev = t - 1 if prev is None else prev
    dtype = x0_probs.dtype
    ref = torch.empty(x_t.shape, dtype=dtype)
    ab_t, bb_t, gb_t = (_col(a, t, ref) for a in (s.alpha_bar, s.beta_bar, s.gamma_bar))
    ab_s, bb_s, gb_s = (_col(a, prev, ref) for a in (s.alpha_bar, s.beta_bar, s.gamma_bar))
    # composed kernel prev -> t
    alpha = torch.where(ab_s > 0, ab_t / torch.where(ab_s > 0, ab_s, torch.ones_like(ab_s)),
                        torch.zeros_like(ab_s))
    gamma = 1.0 - (1.0 - gb_t) / (1.0 - gb_s)
    beta = (1.0 - alpha - gamma) / K

    is_mask = x_t == K
    xt_clean = torch.where(is_mask, torch.zeros_like(x_t), x_t)
    onehot_t = F.one_hot(xt_clean, K).to(dtype)
    # M_row[v] = P(x_t | x_prev = v) for v < K, and for v = MASK
    row_clean = torch.where(is_mask[..., None], gamma[..., None].expand(*x_t.shape, K),
                            alpha[..., None] * onehot_t + beta[..., None])
    row_mask = torch.where(is_mask, torch.ones_like(gamma.expand_as(x_t.to(dtype))),
                           torch.zeros_like(gamma.expand_as(x_t.to(dtype))))
    # normaliser q(x_t | x0) for every candidate x0
    z = torch.where(is_mask[..., None], gb_t[..., None].expand(*x_t.shape, K),
                    ab_t[..., None] * onehot_t + bb_t[..., None])
    if torch.any((z <= 0) & (x0_probs > 0)):
        raise InputError("posterior normaliser vanished: impossible (x_t, x0) pair under the schedule")
    w = x0_probs / torch.where(z > 0, z, torch.ones_like(z))
    w_sum = w.sum(-1)
    clean = row_clean * (ab_s[..., None] * w + (bb_s * w_sum)[..., None])
    masked = row_mask * gb_s * w_sum
    return torch.cat([clean, masked[..., None]], dim=-1)


def kl_categorical(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """``sum q log(q / p)`` over the last axis; ``0 log 0 = 0``."""
    return (torch.xlogy(q, q) - q * torch.log(p.clamp_min(1e-300))).sum(-1)


def vlb_terms(s: NoiseSchedule, x0: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor,
              x0_logits: torch.Tensor) -> torch.Tensor:
    """Per-item VLB term: mean KL(q || p_theta) for ``t >= 2``, mean NLL of ``x0`` at ``t = 1``."""
    log_p0 = torch.log_softmax(x0_logits.to(torch.float64), dim=-1)
    nll = -log_p0.gather(-1, x0[..., None]).squeeze(-1).mean(-1)
    t_safe = torch.clamp(t, min=2)
    q_post = posterior_probs(s, t_safe, x_t, F.one_hot(x0, s.K).to(torch.float64))
    p_post = posterior_probs(s, t_safe, x_t, log_p0.exp())
    kl = kl_categorical(q_post, p_post).mean(-1)
    return torch.where(t == 1, nll, kl)


def vlb_loss(s: NoiseSchedule, x0: torch.Tensor, x_t: torch.Tensor, t: torch.Tensor,
             x0_logits: torch.Tensor) -> torch.Tensor:
    return vlb_terms(s, x0, x_t, t, x0_logits).mean()


def prior_kl(s: NoiseSchedule, x0: torch.Tensor) -> torch.Tensor:
    """KL(q(x_T | x0) || terminal prior) per item; monitoring only."""
    t = torch.full((x0.shape[0],), s.T, dtype=torch.long)
    q = q_probs(s, t, x0)
    prior = torch.full((s.K + 1,), (1.0 - s.gamma_bar[s.T]) / s.K, dtype=q.dtype)
    prior[s.K] = s.gamma_bar[s.T]
    return kl_categorical(q, prior.expand_as(q)).mean(-1)


# ---------------------------------------------------------------------------
# corruption and sampling
# ---------------------------------------------------------------------------

def corrupt_with_uniforms(s: NoiseSchedule, t: torch.Tensor, x0: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF draw from ``q(x_t | x0)`` given uniforms ``u`` (same shape as ``x0``)."""
    ref = torch.empty(x0.shape, dtype=torch.float64)
    ab, bb, gb = (_col(a, t, ref) for a in (s.alpha_bar, s.beta_bar, s.gamma_bar))
    ab, bb, gb = ab.expand_as(ref), bb.expand_as(ref), gb.expand_as(ref)
    u = torch.as_tensor(u, dtype=torch.float64)
    safe_bb = torch.where(bb > 0, bb, torch.ones_like(bb))
    resampled = torch.floor((u - gb - ab) / safe_bb).long().clamp(0, s.K - 1)
    out = torch.where(u < gb + ab, x0, resampled)
    return torch.where(u < gb, torch.full_like(x0, s.K), out)


def forward_corrupt(s: NoiseSchedule, t: int, x0_seq, seed: int) -> torch.Tensor:
    """Corrupt a mask-free sequence to step ``t``; keyed by ``(seed, t, position)``."""
    x0 = torch.as_tensor(x0_seq, dtype=torch.long)
    if t == 0:
        return x0.clone()
    _check_t(s, t)
    if torch.any(x0 >= s.K) or torch.any(x0 < 0):
        raise InputError("forward_corrupt expects a mask-free token sequence")
    u = torch.from_numpy(counter_uniform(seed, t, np.arange(x0.numel()))).reshape(x0.shape)
    tt = torch.full((1,), t, dtype=torch.long)
    return corrupt_with_uniforms(s, tt, x0.reshape(1, -1), u.reshape(1, -1)).reshape(x0.shape)


def forward_step(s: NoiseSchedule, t: int, x_prev, seed: int) -> torch.Tensor:
    """One chain step ``x_{t-1} -> x_t``; MASK positions stay MASK."""
    _check_t(s, t)
    x = torch.as_tensor(x_prev, dtype=torch.long)
    u = torch.from_numpy(counter_uniform(seed, t, np.arange(x.numel()), stream=1)).reshape(x.shape)
    mask = u < s.gamma[t]
    keep = u < s.gamma[t] + s.alpha[t]
    resampled = torch.floor((u - s.gamma[t] - s.alpha[t]) / max(s.beta[t], 1e-300)).long().clamp(0, s.K - 1)
    out = torch.where(keep, x, resampled)
    out = torch.where(mask, torch.full_like(x, s.K), out)
    return torch.where(x == s.K, x, out)


def sample_categorical(probs: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF categorical draw along the last axis."""
    cdf = torch.cumsum(probs, dim=-1)
    cdf = cdf / cdf[..., -1:]
    idx = torch.searchsorted(cdf, u[..., None].to(cdf.dtype), right=True).squeeze(-1)
    return idx.clamp(max=probs.shape[-1] - 1)


def strided_timesteps(T: int, steps: int) -> List[int]:
    """``steps`` evenly spaced timesteps from ``T`` down to >= 1."""
    if not 1 <= steps <= T:
        raise ConfigError(f"sampling steps must lie in [1, {T}], got {steps}")
    return [int(round(T * i / steps)) for i in range(steps, 0, -1)]


def sample(denoise: Callable[[torch.Tensor, torch.Tensor], torch.Tensor], s: NoiseSchedule,
           batch: int, length: int, steps: int, seed: int) -> torch.Tensor:
    """Ancestral sampling with exact strided skipping.

    ``denoise(x_t, t)`` returns x0-logits ``[B, N, K]``. Returns ``[B, N]``
    tokens in ``[0, K)``.
    """
    taus = strided_timesteps(s.T, steps)
    positions = np.arange(batch * length)

    def uniforms(step_key, stream):
        return torch.from_numpy(counter_uniform(seed, step_key, positions, stream)).reshape(batch, length)

    gb_T = s.gamma_bar[s.T]
    u = uniforms(s.T + 1, 0)
    x = torch.where(u < gb_T, torch.full((batch, length), s.K, dtype=torch.long),
                    torch.floor((u - gb_T) / max(1.0 - gb_T, 1e-300) * s.K).long().clamp(0, s.K - 1))
    for i, tau in enumerate(taus):
        t = torch.full((batch,), tau, dtype=torch.long)
        logits = denoise(x, t)
        if not torch.isfinite(logits).all():
            raise NumericError(f"non-finite denoiser logits at t={tau}")
        x0_probs = torch.softmax(logits.to(torch.float64), dim=-1)
        if i == len(taus) - 1:
            x = sample_categorical(x0_probs, uniforms(tau, 2))
        else:
            prev = torch.full((batch,), taus[i + 1], dtype=torch.long)
            probs = posterior_probs(s, t, x, x0_probs, prev)
            x = sample_categorical(probs, uniforms(tau, 1))
    return x


def training_timesteps(s: NoiseSchedule, seed: int, step: int, batch: int) -> torch.Tensor:
    """Uniform ``t`` in ``1..T`` per item, keyed by the optimisation step."""
    u = counter_uniform(seed, step, np.arange(batch), stream=7)
    return torch.from_numpy(np.minimum((u * s.T).astype(np.int64) + 1, s.T))


def corruption_uniforms(seed: int, step: int, key: int, length: int) -> torch.Tensor:
    """Uniforms for corrupting one item (``key``) at one optimisation step."""
    return torch.from_numpy(counter_uniform(derive_seed(seed, step, key), 0, np.arange(length), stream=3))
