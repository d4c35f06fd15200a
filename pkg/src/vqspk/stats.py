"""Gaussian segment statistics and second-order distance measures.

Four measures compare two segments:

* ``delta_bic``          - BIC difference between one joint Gaussian and two
                           separate ones; positive means similar, so it ranks
                           in descending order.
* ``divergence_shape``   - covariance-only part of the symmetric divergence.
* ``ahs``                - arithmetic-harmonic sphericity, scale invariant.
* ``hotelling_t2``       - mean difference under a pooled covariance.

Every inversion or log-determinant goes through a ridge-regularised copy of
the matrix, ``C + ridge * (tr(C) / d) * I``, and a Cholesky factorisation.
With ``ridge=0`` a singular matrix raises :class:`SingularCovariance`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg

from .errors import DimensionMismatch, SingularCovariance, TooFewFrames
from .features import FrameMatrix
from .vsm import Candidate

DEFAULT_RIDGE = 1e-6
DEFAULT_LAMBDA = 1.0

SO_METRICS = ("bic", "ds", "ahs", "t2")
_LABELS = {"bic": "BIC", "ds": "DS", "ahs": "AHS", "t2": "T2 statistic"}


@dataclass(frozen=True)
class SoMetric:
    """A second-level measure together with its tuning knobs."""

    name: str = "bic"
    lam: float = DEFAULT_LAMBDA
    ridge: float = DEFAULT_RIDGE
    ahs_literal: bool = False

    def __post_init__(self):
        if self.name not in SO_METRICS:
            raise ValueError(f"unknown second-level metric {self.name!r}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")

    @property
    def higher_is_closer(self) -> bool:
        return self.name == "bic"

    @property
    def label(self) -> str:
        return _LABELS[self.name] + (" (literal)" if self.ahs_literal and self.name == "ahs" else "")


@dataclass(frozen=True, eq=False)
class SegmentStats:
    """Frame count, mean and covariance of one segment.

    ``scatter`` is the centred sum of outer products, sum((x - mean)(x - mean)^T).
    Together with ``n`` and ``mean`` it lets two segments be pooled exactly.
    """

    segment_id: str
    n: int
    mean: np.ndarray
    scatter: np.ndarray
    cov: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.n < 2:
            raise TooFewFrames(f"{self.segment_id}: need at least 2 frames, got {self.n}")
        s = np.asarray(self.scatter, dtype=np.float64)
        s = 0.5 * (s + s.T)
        object.__setattr__(self, "scatter", s)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", s / (self.n - 1))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def total(self) -> np.ndarray:
        return self.n * self.mean

    @property
    def ml_cov(self) -> np.ndarray:
        return self.scatter / self.n

    @property
    def underdetermined(self) -> bool:
        # covariance cannot be full rank without the ridge
        return self.n < self.dim + 1

    @classmethod
    def from_cov(cls, segment_id: str, n: int, mean, cov) -> "SegmentStats":
        return cls(segment_id, int(n), mean, np.asarray(cov, dtype=np.float64) * (n - 1))


def segment_stats(seg: Union[FrameMatrix, np.ndarray], segment_id: Optional[str] = None) -> SegmentStats:
    """Mean and unbiased covariance of a segment's frames."""
    if isinstance(seg, FrameMatrix):
        rows, sid = seg.rows, seg.segment_id
    else:
        rows, sid = np.atleast_2d(np.asarray(seg, dtype=np.float64)), segment_id or ""
    n = rows.shape[0]
    if n < 2:
        raise TooFewFrames(f"{sid}: need at least 2 frames, got {n}")
    mu = rows.sum(axis=0) / n
    centred = rows - mu
    return SegmentStats(sid, n, mu, centred.T @ centred)


def _pooled_scatter(a: SegmentStats, b: SegmentStats) -> Tuple[int, np.ndarray]:
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions differ: {a.dim} vs {b.dim}")
    n = a.n + b.n
    delta = a.mean - b.mean
    return n, a.scatter + b.scatter + np.outer(delta, delta) * (a.n * b.n / n)


def pooled_cov(a: SegmentStats, b: SegmentStats) -> Tuple[int, np.ndarray]:
    """Unbiased covariance of the union of both segments' frames.

    Exact: built from the two scatters plus the between-mean term, not an
    average of the two covariances.
    """
    n, s = _pooled_scatter(a, b)
    return n, s / (n - 1)


def regularize(c: np.ndarray, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if ridge == 0:
        return c
    d = c.shape[0]
    tr = np.trace(c)
    load = ridge * tr / d if tr > 0 else ridge
    return c + load * np.eye(d)


def _cholesky(c: np.ndarray) -> np.ndarray:
    try:
        return linalg.cholesky(c, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovariance(str(exc)) from exc


def logdet(c: np.ndarray, ridge: float = DEFAULT_RIDGE) -> float:
    """Log-determinant from the Cholesky factor of the regularised matrix."""
    L = _cholesky(regularize(c, ridge))
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _inverse(c: np.ndarray) -> np.ndarray:
    L = _cholesky(c)
    inv = linalg.cho_solve((L, True), np.eye(c.shape[0]))
    return 0.5 * (inv + inv.T)


def bic_penalty(d: int, n: int) -> float:
    return 0.5 * (d + 0.5 * d * (d + 1)) * np.log(n)


def delta_bic(a: SegmentStats, b: SegmentStats, lam: float = DEFAULT_LAMBDA,
              ridge: float = DEFAULT_RIDGE) -> float:
    """BIC difference of two segments (positive = similar).

    Covariances are the maximum-likelihood (divide-by-n) estimates that the
    Gaussian likelihood behind BIC is built on; for a segment paired with
    itself the log-determinant terms then cancel and only ``lam * P`` remains.
    """
    n, s = _pooled_scatter(a, b)
    d = a.dim
    ld_a = logdet(a.ml_cov, ridge)
    ld_b = logdet(b.ml_cov, ridge)
    ld_ab = logdet(s / n, ridge)
    return 0.5 * a.n * ld_a + 0.5 * b.n * ld_b - 0.5 * n * ld_ab + lam * bic_penalty(d, n)


def _as_cov(x) -> np.ndarray:
    return x.cov if isinstance(x, SegmentStats) else np.asarray(x, dtype=np.float64)


def _cov_pair(c1, c2, ridge):
    c1, c2 = _as_cov(c1), _as_cov(c2)
    if c1.shape != c2.shape:
        raise DimensionMismatch(f"covariance shapes differ: {c1.shape} vs {c2.shape}")
    return regularize(c1, ridge), regularize(c2, ridge)


def divergence_shape(c1, c2, ridge: float = DEFAULT_RIDGE) -> float:
    """0.5 * tr[(C1 - C2)(C2^-1 - C1^-1)]; accepts matrices or SegmentStats."""
    r1, r2 = _cov_pair(c1, c2, ridge)
    # tr(A B) == sum(A * B^T) and the inverse difference is symmetric
    return 0.5 * float(np.sum((r1 - r2) * (_inverse(r2) - _inverse(r1))))


def ahs(c1, c2, ridge: float = DEFAULT_RIDGE, literal: bool = False) -> float:
    """Arithmetic-harmonic sphericity, log(tr(C1 C2^-1) tr(C2 C1^-1) / d^2).

    ``literal=True`` evaluates 0.5 * tr[(C1 C2^-1)(C2 C1^-1)] instead, which
    collapses to d/2 for any invertible pair.
    """
    r1, r2 = _cov_pair(c1, c2, ridge)
    i1, i2 = _inverse(r1), _inverse(r2)
    d = r1.shape[0]
    if literal:
        return 0.5 * float(np.trace((r1 @ i2) @ (r2 @ i1)))
    return float(np.log(np.sum(r1 * i2) * np.sum(r2 * i1) / (d * d)))


def hotelling_t2(a: SegmentStats, b: SegmentStats, ridge: float = DEFAULT_RIDGE) -> float:
    if a.dim != b.dim:
        raise DimensionMismatch(f"dimensions differ: {a.dim} vs {b.dim}")
    n, m = a.n, b.n
    pooled = regularize((a.scatter + b.scatter) / (n + m - 2), ridge)
    delta = a.mean - b.mean
    x = linalg.cho_solve((_cholesky(pooled), True), delta)
    return float(n * m / (n + m) * np.dot(delta, x))


def pair_score(a: SegmentStats, b: SegmentStats, metric: SoMetric) -> float:
    """Score one pair with the plain (non-batched) implementations."""
    if metric.name == "bic":
        return delta_bic(a, b, metric.lam, metric.ridge)
    if metric.name == "ds":
        return divergence_shape(a, b, metric.ridge)
    if metric.name == "ahs":
        return ahs(a, b, metric.ridge, metric.ahs_literal)
    return hotelling_t2(a, b, metric.ridge)


def _batch_cholesky(mats: np.ndarray):
    """Cholesky of a stack; entries that fail come back as NaN with ok=False."""
    try:
        return np.linalg.cholesky(mats), np.ones(len(mats), dtype=bool)
    except np.linalg.LinAlgError:
        out = np.full_like(mats, np.nan)
        ok = np.zeros(len(mats), dtype=bool)
        for i, m in enumerate(mats):
            try:
                out[i] = np.linalg.cholesky(m)
                ok[i] = True
            except np.linalg.LinAlgError:
                pass
        return out, ok


def _batch_regularize(mats: np.ndarray, ridge: float) -> np.ndarray:
    if ridge == 0:
        return mats
    d = mats.shape[-1]
    tr = np.trace(mats, axis1=1, axis2=2)
    load = np.where(tr > 0, ridge * tr / d, ridge)
    return mats + load[:, None, None] * np.eye(d)


def _batch_logdet(mats: np.ndarray):
    L, ok = _batch_cholesky(mats)
    diag = np.diagonal(L, axis1=1, axis2=2)
    with np.errstate(invalid="ignore"):
        return 2.0 * np.log(diag).sum(axis=1), ok


class StatsBank:
    """Stacked statistics of many segments for vectorised scoring.

    Per-segment quantities (regularised covariance, its inverse, the BIC
    log-determinant) are computed once here so that scoring a query against
    many candidates only costs the pair-specific work.
    """

    def __init__(self, stats: Sequence[SegmentStats], ridge: float = DEFAULT_RIDGE):
        if len(stats) == 0:
            raise ValueError("empty stats bank")
        self.ridge = ridge
        self.ids = [s.segment_id for s in stats]
        self.n = np.array([s.n for s in stats], dtype=np.float64)
        self.means = np.stack([s.mean for s in stats])
        self.scatter = np.stack([s.scatter for s in stats])
        self.dim = self.means.shape[1]
        self.reg_cov = _batch_regularize(self.scatter / (self.n - 1)[:, None, None], ridge)
        L, ok = _batch_cholesky(self.reg_cov)
        eye = np.broadcast_to(np.eye(self.dim), L.shape)
        inv = np.full_like(L, np.nan)
        if ok.any():
            Linv = np.linalg.solve(L[ok], eye[ok])
            inv[ok] = np.swapaxes(Linv, 1, 2) @ Linv
            inv[ok] = 0.5 * (inv[ok] + np.swapaxes(inv[ok], 1, 2))
        self.reg_inv = inv
        self.inv_ok = ok
        self.ml_logdet, self.ml_ok = _batch_logdet(
            _batch_regularize(self.scatter / self.n[:, None, None], ridge))

    def __len__(self):
        return len(self.ids)

    def score(self, q: int, cand: np.ndarray, metric: SoMetric,
              query_bank: Optional["StatsBank"] = None):
        """Scores of entry ``q`` against entries ``cand``.

        ``query_bank`` holds the query when it is not part of this bank.
        Returns (scores, ok) where ok marks pairs whose matrices factorised.
        """
        qb = self if query_bank is None else query_bank
        if self.ridge != metric.ridge or qb.ridge != metric.ridge:
            raise ValueError("bank ridge differs from metric ridge")
        cand = np.asarray(cand, dtype=np.int64)
        nq, nc = qb.n[q], self.n[cand]
        d = self.dim
        if qb.dim != d:
            raise DimensionMismatch(f"dimensions differ: {qb.dim} vs {d}")
        if metric.name == "bic":
            nij = nq + nc
            delta = qb.means[q] - self.means[cand]
            outer = delta[:, :, None] * delta[:, None, :]
            pooled = qb.scatter[q] + self.scatter[cand] + outer * (nq * nc / nij)[:, None, None]
            ld, ok = _batch_logdet(_batch_regularize(pooled / nij[:, None, None], metric.ridge))
            ok &= qb.ml_ok[q] & self.ml_ok[cand]
            pen = 0.5 * (d + 0.5 * d * (d + 1)) * np.log(nij)
            s = 0.5 * nq * qb.ml_logdet[q] + 0.5 * nc * self.ml_logdet[cand] - 0.5 * nij * ld + metric.lam * pen
        elif metric.name == "t2":
            pooled = _batch_regularize((qb.scatter[q] + self.scatter[cand]) / (nq + nc - 2)[:, None, None],
                                       metric.ridge)
            delta = qb.means[q] - self.means[cand]
            L, ok = _batch_cholesky(pooled)
            y = np.full_like(delta, np.nan)
            if ok.any():
                y[ok] = np.linalg.solve(L[ok], delta[ok][:, :, None])[:, :, 0]
            s = nq * nc / (nq + nc) * (y * y).sum(axis=1)
        else:
            ok = qb.inv_ok[q] & self.inv_ok[cand]
            rq, iq = qb.reg_cov[q], qb.reg_inv[q]
            rc, ic = self.reg_cov[cand], self.reg_inv[cand]
            if metric.name == "ds":
                s = 0.5 * ((rq - rc) * (ic - iq)).sum(axis=(1, 2))
            elif metric.ahs_literal:
                s = 0.5 * np.trace((rq @ ic) @ (rc @ iq), axis1=1, axis2=2)
            else:
                with np.errstate(invalid="ignore"):
                    s = np.log((rq * ic).sum(axis=(1, 2)) * (rc * iq).sum(axis=(1, 2)) / (d * d))
        s = np.where(ok, s, np.nan)
        return s, ok


def order_candidates(ids: Sequence[str], scores: np.ndarray, ok: np.ndarray,
                     higher_is_closer: bool) -> List[Candidate]:
    """Closest first; ties by ascending id; pairs that failed to score go last."""
    ids = list(ids)
    rank = {sid: r for r, sid in enumerate(sorted(ids))}
    id_rank = np.array([rank[s] for s in ids])
    key = np.where(ok, -scores if higher_is_closer else scores, 0.0)
    order = np.lexsort((id_rank, key, ~ok))
    return [Candidate(ids[i], float(scores[i]), flagged=not ok[i]) for i in order]


def rerank(query: SegmentStats, candidates: Sequence[SegmentStats], metric: SoMetric) -> List[Candidate]:
    """Order ``candidates`` by their second-order score against ``query``."""
    if len(candidates) == 0:
        raise ValueError("rerank needs at least one candidate")
    bank = StatsBank(candidates, metric.ridge)
    qbank = StatsBank([query], metric.ridge)
    scores, ok = bank.score(0, np.arange(len(bank)), metric, query_bank=qbank)
    return order_candidates(bank.ids, scores, ok, metric.higher_is_closer)
