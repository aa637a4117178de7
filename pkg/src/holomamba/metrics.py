"""Leave-one-out ranking metrics over the full item catalog."""
from __future__ import annotations

import math

import numpy as np

from .errors import ContractError


def rank_of_target(scores, target: int) -> int:
    """1-based rank of ``target`` among items 1..V-1.

    Ties are broken by id: an equal-scoring item with a smaller id ranks
    ahead. Index 0 (padding) never counts.
    """
    scores = np.asarray(scores)
    if not 1 <= target < scores.shape[-1]:
        raise ContractError(f"target {target} is padding or out of range for {scores.shape[-1]} scores")
    return int(ranks_of_targets(scores[None], np.array([target]))[0])


def ranks_of_targets(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_of_target` for a ``[U, V]`` score matrix."""
    targets = np.asarray(targets)
    if np.any(targets < 1) or np.any(targets >= scores.shape[-1]):
        raise ContractError("every target must be a real item id")
    real = scores[:, 1:]
    t_score = np.take_along_axis(scores, targets[:, None], axis=1)
    ids = np.arange(1, scores.shape[1])[None, :]
    ahead = (real > t_score) | ((real == t_score) & (ids < targets[:, None]))
    return 1 + ahead.sum(axis=1)


def hit_and_ndcg_at_k(ranks, k: int) -> tuple[float, float]:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ContractError("no ranks to aggregate")
    if np.any(ranks < 1):
        raise ContractError("ranks are 1-based")
    hit = ranks <= k
    gain = np.where(hit, 1.0 / np.log2(1.0 + ranks), 0.0)
    return float(hit.mean()), float(gain.mean())


def final_scores(model, split, compressed: bool | None = None, batch_size: int = 256) -> np.ndarray:
    """Final-position logits for every user, padding column set to -inf."""
    out = np.empty((split.num_users, model.config.vocab_items), dtype=np.float64)
    for start in range(0, split.num_users, batch_size):
        rows = slice(start, start + batch_size)
        out[rows] = model.final_logits(split.inputs[rows], split.attrs[rows], compressed)
    out[:, 0] = -math.inf
    return out


def evaluate(model, split, k: int = 10, compressed: bool | None = None) -> tuple[float, float]:
    """HR@k and NDCG@k of the held-out item, scored from the full prefix."""
    ranks = ranks_of_targets(final_scores(model, split, compressed), split.test_target)
    return hit_and_ndcg_at_k(ranks, k)
