"""Measurement stack: the 4x-negatives evaluation protocol, threshold
classification and confusion metrics, retrieval with Top-K curves,
classical image-similarity baselines, kernel density estimates, and
similarity matrices.

One convention rules ranking everywhere: higher score = more similar.
MSE is the lone dissimilarity; ``ranking_score`` negates it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASSICAL_KINDS = ("MSE", "NMI", "SSIM", "Pearson", "Cosine")

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01**2  # (K1 * L)^2 with dynamic range L = 1
_SSIM_C2 = 0.03**2
_NMI_BINS = 32


class EvaluationError(ValueError):
    pass


class UndefinedMetricError(EvaluationError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


@dataclass
class EvalPairSet:
    """Index pairs (i, j) meaning (query A_i, gallery B_j)."""

    positives: list[tuple[int, int]]
    hard_negatives: list[tuple[int, int]]
    random_negatives: list[tuple[int, int]]


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    recall: float
    specificity: float
    precision: float
    topk: list[float]
    similarity_matrix: np.ndarray
    kde_pos: tuple[np.ndarray, np.ndarray]
    kde_neg: tuple[np.ndarray, np.ndarray]


# ---------------------------------------------------------------------------
# evaluation pair protocol


def build_eval_pairs(emb_a: np.ndarray, emb_b: np.ndarray,
                     rng: np.random.Generator) -> EvalPairSet:
    """All matched pairs as positives plus 4x as many negatives, half hard
    (highest model similarity among non-matching combinations) and half
    random from the remainder."""
    n = len(emb_a)
    if n == 0 or len(emb_b) != n:
        raise EvaluationError("need equally many A and B embeddings, at least one pair")
    needed = 4 * n
    candidates = [(i, j) for i in range(n) for j in range(n) if i != j]
    if len(candidates) < needed:
        raise EvaluationError(
            f"gallery too small: {len(candidates)} non-matching combinations "
            f"cannot supply {needed} negatives"
        )
    sims = emb_a @ emb_b.T
    ordered = sorted(candidates, key=lambda ij: (-sims[ij[0], ij[1]], ij[0], ij[1]))
    hard = ordered[: 2 * n]
    rest = ordered[2 * n :]
    pick = rng.choice(len(rest), size=2 * n, replace=False)
    random_neg = [rest[int(k)] for k in sorted(pick)]
    return EvalPairSet(
        positives=[(i, i) for i in range(n)],
        hard_negatives=hard,
        random_negatives=random_neg,
    )


def pair_distances(pairs: EvalPairSet, emb_a: np.ndarray,
                   emb_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine distances (1 - similarity) for positives and all negatives."""
    sims = emb_a @ emb_b.T
    pos = np.array([1.0 - sims[i, j] for i, j in pairs.positives])
    neg = np.array([1.0 - sims[i, j]
                    for i, j in [*pairs.hard_negatives, *pairs.random_negatives]])
    return pos, neg


# ---------------------------------------------------------------------------
# threshold classification


def classify_pairs(pos_distances, neg_distances, threshold: float) -> ConfusionMatrix:
    """Strict rule: distance < threshold predicts "matched"."""
    pos = np.asarray(pos_distances, dtype=np.float64)
    neg = np.asarray(neg_distances, dtype=np.float64)
    tp = int((pos < threshold).sum())
    fp = int((neg < threshold).sum())
    return ConfusionMatrix(tp=tp, fn=pos.size - tp, tn=neg.size - fp, fp=fp)


def confusion_metrics(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(recall, specificity, precision); zero denominators are errors."""
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("recall undefined: no positive pairs")
    if cm.tn + cm.fp == 0:
        raise UndefinedMetricError("specificity undefined: no negative pairs")
    if cm.tp + cm.fp == 0:
        raise UndefinedMetricError("precision undefined: nothing predicted positive")
    return (cm.tp / (cm.tp + cm.fn), cm.tn / (cm.tn + cm.fp), cm.tp / (cm.tp + cm.fp))


def select_threshold(pos_distances, neg_distances) -> float:
    """Midpoint threshold maximizing Youden's J = recall + specificity - 1.

    Ties break toward the smaller threshold.
    """
    pos = np.asarray(pos_distances, dtype=np.float64)
    neg = np.asarray(neg_distances, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("threshold selection needs both classes")
    values = np.unique(np.concatenate([pos, neg]))
    candidates = (values[:-1] + values[1:]) / 2.0 if values.size > 1 else np.array([values[0]])
    best_t, best_j = None, -math.inf
    for t in candidates:
        cm = classify_pairs(pos, neg, t)
        j = cm.tp / (cm.tp + cm.fn) + cm.tn / (cm.tn + cm.fp) - 1.0
        if j > best_j:
            best_t, best_j = float(t), j
    return best_t


# ---------------------------------------------------------------------------
# retrieval


def retrieve(queries: np.ndarray, gallery: np.ndarray) -> list[list[int]]:
    """Gallery indices per query by descending cosine similarity; ties break
    by ascending index."""
    queries = np.asarray(queries)
    gallery = np.asarray(gallery)
    if gallery.size == 0:
        raise EvaluationError("empty gallery")
    sims = queries @ gallery.T
    return [sorted(range(gallery.shape[0]), key=lambda j: (-sims[q, j], j))
            for q in range(queries.shape[0])]


def topk_curve(ranked: list[list[int]], truth: list[int], k_max: int) -> list[float]:
    if not ranked:
        raise EvaluationError("no queries")
    gallery_size = len(ranked[0])
    if k_max > gallery_size:
        raise EvaluationError(f"k_max={k_max} exceeds gallery size {gallery_size}")
    hits_at = np.zeros(k_max)
    for ranks, true_idx in zip(ranked, truth):
        pos = ranks.index(true_idx)
        if pos < k_max:
            hits_at[pos] += 1
    return list(np.cumsum(hits_at) / len(ranked))


# ---------------------------------------------------------------------------
# classical similarity baselines


def _check_images(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _gaussian_window() -> np.ndarray:
    ax = np.arange(_SSIM_WINDOW) - _SSIM_WINDOW // 2
    g = np.exp(-(ax**2) / (2.0 * _SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_window()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    oh, ow = img.shape[0] - kh + 1, img.shape[1] - kw + 1
    out = np.zeros((oh, ow))
    for u in range(kh):
        for v in range(kw):
            out += kernel[u, v] * img[u : u + oh, v : v + ow]
    return out


def _ssim(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise EvaluationError(f"images smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} SSIM window")
    k = _SSIM_KERNEL
    mu1, mu2 = _filter_valid(a, k), _filter_valid(b, k)
    s11 = _filter_valid(a * a, k) - mu1 * mu1
    s22 = _filter_valid(b * b, k) - mu2 * mu2
    s12 = _filter_valid(a * b, k) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + _SSIM_C1) * (2.0 * s12 + _SSIM_C2)
    den = (mu1**2 + mu2**2 + _SSIM_C1) * (s11 + s22 + _SSIM_C2)
    return float((num / den).mean())


def _nmi(a: np.ndarray, b: np.ndarray) -> float:
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=_NMI_BINS,
                                 range=[[0.0, 1.0], [0.0, 1.0]])
    p = joint / joint.sum()
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    hx = float(-(px[px > 0] * np.log(px[px > 0])).sum())
    hy = float(-(py[py > 0] * np.log(py[py > 0])).sum())
    if hx + hy == 0.0:
        raise UndefinedMetricError("NMI undefined for two constant images")
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / (px[:, None] * py[None, :])[nz])).sum())
    return 2.0 * mi / (hx + hy)


def classical_similarity(image_a, image_b, kind: str) -> float:
    """MSE / NMI / SSIM / Pearson / Cosine between two same-shape images.

    MSE is returned as the plain mean squared error (a dissimilarity);
    use :func:`ranking_score` when ordering candidates.
    """
    a, b = _check_images(image_a, image_b)
    if kind == "MSE":
        return float(((a - b) ** 2).mean())
    if kind == "NMI":
        return _nmi(a, b)
    if kind == "SSIM":
        return _ssim(a, b)
    if kind == "Pearson":
        av, bv = a.ravel(), b.ravel()
        sa, sb = av.std(), bv.std()
        if sa == 0.0 or sb == 0.0:
            raise UndefinedMetricError("Pearson undefined for a constant image")
        return float(((av - av.mean()) @ (bv - bv.mean())) / (av.size * sa * sb))
    if kind == "Cosine":
        av, bv = a.ravel(), b.ravel()
        na, nb = np.linalg.norm(av), np.linalg.norm(bv)
        if na == 0.0 or nb == 0.0:
            raise UndefinedMetricError("Cosine undefined for an all-zero image")
        return float(av @ bv / (na * nb))
    raise EvaluationError(f"unknown similarity kind {kind!r}; choose from {CLASSICAL_KINDS}")


def ranking_score(image_a, image_b, kind: str) -> float:
    """classical_similarity oriented so that higher always means more similar."""
    value = classical_similarity(image_a, image_b, kind)
    return -value if kind == "MSE" else value


# ---------------------------------------------------------------------------
# kernel density estimation


def kde(values, bandwidth: float | None = None,
        points: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE sampled on a uniform grid over [min-3h, max+3h].

    Default bandwidth is Silverman's 1.06 * sd * n^(-1/5).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise EvaluationError("kde needs at least 2 values")
    if bandwidth is None:
        sd = float(v.std(ddof=1))
        if sd == 0.0:
            raise EvaluationError("kde bandwidth undefined: zero variance; pass one explicitly")
        h = 1.06 * sd * v.size ** (-0.2)
    else:
        h = float(bandwidth)
        if h <= 0:
            raise EvaluationError("bandwidth must be positive")
    xs = np.linspace(v.min() - 3.0 * h, v.max() + 3.0 * h, points)
    z = (xs[:, None] - v[None, :]) / h
    density = np.exp(-0.5 * z * z).sum(axis=1) / (v.size * h * math.sqrt(2.0 * math.pi))
    return xs, density


# ---------------------------------------------------------------------------
# similarity matrices


def similarity_matrix(queries, gallery, scorer) -> np.ndarray:
    """M[i][j] = scorer(queries[i], gallery[j]); works for embeddings or images."""
    if len(queries) == 0 or len(gallery) == 0:
        raise EvaluationError("similarity_matrix needs non-empty inputs")
    return np.array([[float(scorer(q, g)) for g in gallery] for q in queries])


def embedding_cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.asarray(u) @ np.asarray(v))


def diagonal_dominance(matrix: np.ndarray) -> float:
    """Mean diagonal minus mean off-diagonal; positive = matched pairs win."""
    m = np.asarray(matrix)
    n = min(m.shape)
    diag = np.diag(m)[:n]
    mask = ~np.eye(*m.shape, dtype=bool)
    return float(diag.mean() - m[mask].mean())


# ---------------------------------------------------------------------------
# serialization


def report_to_dict(report: EvalReport) -> dict:
    return {
        "confusion": {"tp": report.confusion.tp, "fn": report.confusion.fn,
                      "tn": report.confusion.tn, "fp": report.confusion.fp},
        "recall": report.recall,
        "specificity": report.specificity,
        "precision": report.precision,
        "topk": list(report.topk),
        "similarity_matrix": [list(map(float, row)) for row in report.similarity_matrix],
        "kde_pos": {"x": list(map(float, report.kde_pos[0])),
                    "density": list(map(float, report.kde_pos[1]))},
        "kde_neg": {"x": list(map(float, report.kde_neg[0])),
                    "density": list(map(float, report.kde_neg[1]))},
    }


def save_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report_to_dict(report), indent=1) + "\n",
                          encoding="utf-8")


def save_curve_csv(path: str | Path, header: tuple[str, str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{header[0]},{header[1]}\n")
        for x, y in rows:
            fh.write(f"{x!r},{y!r}\n")


def save_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(matrix):
            fh.write(",".join(repr(float(x)) for x in row) + "\n")
