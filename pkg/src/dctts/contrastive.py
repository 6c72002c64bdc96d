"""Text-wise contrastive loss: similarity-weighted InfoNCE over minibatch negatives."""

from typing import Callable, Optional, Sequence

import torch

from .text import pooled


def condition_similarity(c: torch.Tensor, c_j: torch.Tensor) -> torch.Tensor:
    """Cosine of the mean-pooled conditions; a zero-norm side counts as orthogonal."""
    a, b = pooled(c), pooled(c_j)
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (a * b).sum(-1) / denom, torch.zeros_like(na))


def similarity_weight(c: torch.Tensor, c_j: torch.Tensor) -> torch.Tensor:
    """``1 - sim``; treated as a constant so the loss cannot shrink it by collapsing conditions."""
    return (1.0 - condition_similarity(c, c_j)).detach().clamp(0.0, 2.0)


def token_log_likelihood(logits: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """``sum_p log softmax(logits)[p, z_p]`` over the last sequence axis."""
    log_p = torch.log_softmax(logits.to(torch.float64), dim=-1)
    return log_p.gather(-1, z[..., None]).squeeze(-1).sum(-1)


def sequence_score(denoise: Callable, t: torch.Tensor, x_t: torch.Tensor, z: torch.Tensor,
                   c: Optional[torch.Tensor]) -> torch.Tensor:
    """Step-``t`` log-likelihood of ``z`` as x0 given its corrupted version ``x_t`` under ``c``.

    The caller corrupts ``z`` so that all sequences scored against one anchor
    share the same RNG key.
    """
    return token_log_likelihood(denoise(x_t, t, c), z)


def tcll_from_scores(positive: torch.Tensor, negatives: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """``log(1 + sum_j w_j exp(s_j - s_0))`` evaluated stably.

    ``positive`` is ``[...]``, ``negatives`` and ``weights`` are ``[..., N_neg]``.
    """
    if negatives.shape[-1] == 0:
        return torch.zeros_like(positive)
    diff = negatives - positive[..., None]
    log_w = torch.log(weights.to(diff.dtype))
    terms = torch.where(weights > 0, log_w + diff, torch.full_like(diff, -torch.inf))
    zero = torch.zeros_like(positive)[..., None]
    return torch.logsumexp(torch.cat([zero, terms], dim=-1), dim=-1)


def pairwise_weights(conds: Sequence[torch.Tensor]) -> torch.Tensor:
    """``w[i, j] = 1 - sim(c_i, c_j)`` for every pair (detached)."""
    pooled_c = torch.stack([pooled(c) for c in conds])
    return similarity_weight(pooled_c[:, None, None, :], pooled_c[None, :, None, :])


def tcll_matrix(scores: torch.Tensor, conds: Sequence[torch.Tensor],
                weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean loss over anchors from ``scores[i, j] = score(z_j | c_i)``.

    Negatives for anchor ``i`` are the other items of the batch. ``weights``
    overrides the pairwise similarity weights computed from ``conds``.
    """
    b = scores.shape[0]
    if b < 2:
        return scores.new_zeros(())
    w = pairwise_weights(conds) if weights is None else weights
    losses = []
    for i in range(b):
        others = [j for j in range(b) if j != i]
        losses.append(tcll_from_scores(scores[i, i], scores[i, others], w[i, others]))
    return torch.stack(losses).mean()
