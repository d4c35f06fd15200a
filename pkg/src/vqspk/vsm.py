"""First-level search: histogram similarity measures and exhaustive top-k."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyIndex, ZeroVector


class VsmMetric(enum.Enum):
    COSINE = "cosine"
    NORMALIZED_L2 = "l2"
    BHATTACHARYYA = "bhat"
    INTERSECTION = "intersect"

    @property
    def higher_is_closer(self) -> bool:
        return self is not VsmMetric.NORMALIZED_L2

    @classmethod
    def parse(cls, name: str) -> "VsmMetric":
        for m in cls:
            if name in (m.value, m.name.lower()):
                return m
        raise ValueError(f"unknown first-level metric {name!r}")


@dataclass(frozen=True)
class Candidate:
    segment_id: str
    score: float
    flagged: bool = False


def _pair(f, g):
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if f.shape != g.shape:
        raise DimensionMismatch(f"histogram sizes differ: {f.shape} vs {g.shape}")
    return f, g


def _l2(f):
    n = float(np.sqrt(np.dot(f, f)))
    if n == 0.0:
        raise ZeroVector("histogram has no mass")
    return n


def cosine(f, g) -> float:
    f, g = _pair(f, g)
    return float(np.dot(f, g) / (_l2(f) * _l2(g)))


def normalized_l2(f, g) -> float:
    """Squared distance between the L2-normalised vectors; equals 2 * (1 - cosine)."""
    f, g = _pair(f, g)
    return float(np.sum((f / _l2(f) - g / _l2(g)) ** 2))


def bhattacharyya(f, g) -> float:
    f, g = _pair(f, g)
    return float(np.sum(np.sqrt(f * g)))


def histogram_intersection(f, g) -> float:
    # L1 norms; the denominator is 1 for normalised histograms
    f, g = _pair(f, g)
    return float(np.sum(np.minimum(f, g)) / min(np.sum(f), np.sum(g)))


PAIRWISE = {
    VsmMetric.COSINE: cosine,
    VsmMetric.NORMALIZED_L2: normalized_l2,
    VsmMetric.BHATTACHARYYA: bhattacharyya,
    VsmMetric.INTERSECTION: histogram_intersection,
}


def score_all(query: np.ndarray, hists: np.ndarray, metric: VsmMetric) -> np.ndarray:
    """Score one query histogram against every row of ``hists``."""
    q = np.asarray(query, dtype=np.float64)
    H = np.asarray(hists, dtype=np.float64)
    if H.shape[1] != q.shape[0]:
        raise DimensionMismatch(f"query has {q.shape[0]} bins, index has {H.shape[1]}")
    if metric is VsmMetric.BHATTACHARYYA:
        return np.sqrt(H * q).sum(axis=1)
    if metric is VsmMetric.INTERSECTION:
        return np.minimum(H, q).sum(axis=1) / np.minimum(H.sum(axis=1), q.sum())
    qn = _l2(q)
    hn = np.sqrt((H * H).sum(axis=1))
    if np.any(hn == 0):
        raise ZeroVector("index contains an empty histogram")
    if metric is VsmMetric.COSINE:
        return (H @ q) / (hn * qn)
    return (((H / hn[:, None]) - q / qn) ** 2).sum(axis=1)


def rank_order(scores: np.ndarray, id_rank: np.ndarray, higher_is_closer: bool) -> np.ndarray:
    """Positions sorted closest first; ties fall back to ascending id rank."""
    key = -scores if higher_is_closer else scores
    return np.lexsort((id_rank, key))


def top_k(query_hist: np.ndarray, ids: Sequence[str], hists: np.ndarray, k: int = 50,
          metric: VsmMetric = VsmMetric.INTERSECTION, exclude: str = None) -> List[Candidate]:
    """Exhaustively rank ``hists`` against the query and keep the ``k`` closest.

    The row whose id equals ``exclude`` (normally the query itself) never
    appears in the output.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = list(ids)
    keep = np.array([sid != exclude for sid in ids], dtype=bool)
    if not keep.any():
        raise EmptyIndex("no candidates besides the query")
    pos = np.flatnonzero(keep)
    sub_ids = [ids[i] for i in pos]
    scores = score_all(query_hist, np.asarray(hists)[pos], metric)
    id_rank = np.argsort(np.argsort(np.array(sub_ids, dtype=object), kind="stable"), kind="stable")
    order = rank_order(scores, id_rank, metric.higher_is_closer)[:k]
    return [Candidate(sub_ids[i], float(scores[i])) for i in order]
