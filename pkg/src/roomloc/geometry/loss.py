"""Margin-based room matching loss on cosine similarity of room embeddings."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import UsageError

MARGIN = 0.2


@dataclass
class PairLoss:
    loss: float
    grad: np.ndarray  # d loss / d embeddings, same shape as the embedding stack
    excluded: int  # pairs skipped because an embedding had zero norm


def pair_loss(
    emb: np.ndarray,
    idx_p: np.ndarray,
    idx_q: np.ndarray,
    positive: np.ndarray,
    margin: float = MARGIN,
) -> PairLoss:
    """Loss over pairs indexing rows of ``emb``.

    Positive pairs cost 1 - cos; negative pairs cost max(0, cos - margin).
    """
    emb = np.asarray(emb, dtype=np.float64)
    idx_p, idx_q = np.asarray(idx_p), np.asarray(idx_q)
    positive = np.asarray(positive, dtype=bool)
    if len(idx_p) == 0:
        raise UsageError("room matching loss needs at least one pair")
    norms = np.linalg.norm(emb, axis=1)
    p, q = emb[idx_p], emb[idx_q]
    np_, nq = norms[idx_p], norms[idx_q]
    valid = (np_ > 0) & (nq > 0)
    safe_p = np.where(valid, np_, 1.0)
    safe_q = np.where(valid, nq, 1.0)
    cos = np.where(valid, np.einsum("ij,ij->i", p, q) / (safe_p * safe_q), 0.0)

    active_neg = ~positive & (cos > margin)
    per_pair = np.where(positive, 1.0 - cos, np.where(active_neg, cos - margin, 0.0))
    per_pair = np.where(valid, per_pair, 0.0)
    dcos = np.where(positive, -1.0, np.where(active_neg, 1.0, 0.0)) * valid

    # d cos / d p = q / (|p||q|) - cos p / |p|^2
    gp = dcos[:, None] * (q / (safe_p * safe_q)[:, None] - cos[:, None] * p / (safe_p**2)[:, None])
    gq = dcos[:, None] * (p / (safe_p * safe_q)[:, None] - cos[:, None] * q / (safe_q**2)[:, None])
    grad = np.zeros_like(emb)
    np.add.at(grad, idx_p, gp)
    np.add.at(grad, idx_q, gq)
    return PairLoss(float(per_pair.sum()), grad, int((~valid).sum()))


def room_matching_loss(
    pairs: Sequence[tuple[np.ndarray, np.ndarray, bool]], margin: float = MARGIN
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]], int]:
    """Loss and per-pair gradients for explicit (r_p, r_q, is_positive) triples.

    Returns (loss, [(d r_p, d r_q), ...], number of excluded zero-norm pairs).
    """
    if len(pairs) == 0:
        raise UsageError("room matching loss needs at least one pair")
    emb = np.stack([v for rp, rq, _ in pairs for v in (rp, rq)])
    n = len(pairs)
    res = pair_loss(
        emb, np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2), np.array([lab for *_, lab in pairs]), margin
    )
    grads = [(res.grad[2 * i], res.grad[2 * i + 1]) for i in range(n)]
    return res.loss, grads, res.excluded
