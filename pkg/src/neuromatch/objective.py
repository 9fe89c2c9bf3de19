"""Pair mining and metric-learning losses.

Hard negatives are the cross-label pairs whose cosine distance falls
strictly below the threshold alpha; positives are every same-label pair.
The circle loss couples each positive similarity against each negative
similarity inside one log-sum-exp, so gradient mass concentrates on the
hardest pairs automatically. A hinge triplet loss is kept as the
ablation alternative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class MinerConfig:
    alpha: float = 0.7
    distance_kind: str = "cosine"

    def validate(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.distance_kind != "cosine":
            raise ValueError(f"unsupported distance_kind {self.distance_kind!r}")


@dataclass
class MinedPairs:
    """Index pairs (i, j) with i < j: same-label positives, selected negatives."""

    positives: list[tuple[int, int]] = field(default_factory=list)
    negatives: list[tuple[int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class CircleLossParams:
    m: float = 0.25
    gamma: float = 32.0

    def validate(self) -> None:
        if self.m < 0:
            raise ValueError("margin m must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


def cosine_similarities(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise dot products, clipped into [-1, 1] against fp drift."""
    s = np.asarray(embeddings) @ np.asarray(embeddings).T
    return np.clip(s, -1.0, 1.0)


def mine_hard_negatives(embeddings: np.ndarray, labels, config: MinerConfig) -> MinedPairs:
    """Positives: all same-label pairs. Negatives: cross-label pairs with
    cosine distance strictly below alpha."""
    config.validate()
    labels = np.asarray(labels)
    n = len(labels)
    if len(embeddings) != n:
        raise ValueError("embeddings and labels disagree in length")
    if n < 2:
        raise ValueError("need at least 2 samples to mine pairs")
    dist = 1.0 - cosine_similarities(embeddings)
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    pos_mask = same & upper
    neg_mask = (~same) & upper & (dist < config.alpha)
    mined = MinedPairs(
        positives=[(int(i), int(j)) for i, j in zip(*np.nonzero(pos_mask))],
        negatives=[(int(i), int(j)) for i, j in zip(*np.nonzero(neg_mask))],
    )
    return mined


def standard_pairs(labels) -> MinedPairs:
    """The no-mining baseline: every cross-label pair is a negative."""
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValueError("need at least 2 samples")
    same = labels[:, None] == labels[None, :]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    return MinedPairs(
        positives=[(int(i), int(j)) for i, j in zip(*np.nonzero(same & upper))],
        negatives=[(int(i), int(j)) for i, j in zip(*np.nonzero(~same & upper))],
    )


def pair_similarities(embeddings: np.ndarray, mined: MinedPairs) -> tuple[list[float], list[float]]:
    """Cosine similarity per listed pair, order preserved."""
    emb = np.asarray(embeddings)
    n = len(emb)
    for i, j in [*mined.positives, *mined.negatives]:
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"pair index ({i}, {j}) out of range for {n} embeddings")
    s_p = [float(emb[i] @ emb[j]) for i, j in mined.positives]
    s_n = [float(emb[i] @ emb[j]) for i, j in mined.negatives]
    return s_p, s_n


def _as_tensor_1d(values) -> Tensor:
    if isinstance(values, Tensor):
        if values.data.ndim != 1:
            raise T.ShapeError("similarity list tensor must be 1-D")
        return values
    return T.constant(np.asarray(values, dtype=np.float64).reshape(-1))


def _logsumexp_1d(z: Tensor) -> Tensor:
    """log(sum(exp(z))) with a constant max-shift; gradient-safe."""
    c = float(z.data.max())
    shifted = T.exp(T.add(z, T.constant(-c)))
    return T.add(T.log(T.sum_all(shifted)), T.constant(c))


def circle_loss(s_p, s_n, params: CircleLossParams) -> Tensor:
    """log(1 + sum_{i in P} sum_{j in N} exp(gamma * (s_n_j - s_p_i + m))).

    The double sum factorizes into two log-sum-exps, then a softplus; all
    exponentials are max-shifted, so gamma = 256 stays finite. When either
    list is empty the sum is empty and the loss is exactly 0.
    """
    params.validate()
    sp = _as_tensor_1d(s_p)
    sn = _as_tensor_1d(s_n)
    if sp.data.size == 0 or sn.data.size == 0:
        return T.constant(0.0)
    lse_n = _logsumexp_1d(T.scale(sn, params.gamma))
    lse_p = _logsumexp_1d(T.scale(sp, -params.gamma))
    t = T.add(T.add(lse_n, lse_p), T.constant(params.gamma * params.m))
    # softplus(t) = c + log(exp(t - c) + exp(-c)) with c = max(t, 0)
    c = max(float(t.data), 0.0)
    inner = T.add(T.exp(T.add(t, T.constant(-c))), T.constant(np.exp(-c)))
    return T.add(T.log(inner), T.constant(c))


def triplet_loss(d_ap, d_an, margin: float) -> Tensor:
    """mean(max(0, d_ap - d_an + margin)) over matched triplets."""
    if margin < 0:
        raise ValueError("margin must be >= 0")
    ap = _as_tensor_1d(d_ap)
    an = _as_tensor_1d(d_an)
    if ap.data.size != an.data.size:
        raise T.ShapeError(
            f"d_ap and d_an must have equal length, got {ap.data.size} and {an.data.size}"
        )
    if ap.data.size == 0:
        return T.constant(0.0)
    hinge = T.relu(T.add(T.add(ap, T.scale(an, -1.0)), T.constant(float(margin))))
    return T.mean_all(hinge)
