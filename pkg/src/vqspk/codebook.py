"""Universal bag-of-frames codebook: k-means training and frame histograms."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import CorruptFile, DimensionMismatch, EmptyCorpus, EmptySegment, TooFewFrames
from .features import FrameMatrix

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"SPKCBK1\0"
DEFAULT_K = 2048
DEFAULT_PER_SEGMENT = 100
_CHUNK = 4096


@dataclass
class Codebook:
    """K centroids shared by every segment model.

    Centroids are stored at single precision so a codebook written to disk
    and read back is identical to the one held in memory.
    """

    centroids: np.ndarray
    train_seed: int = 0
    iterations: Optional[int] = None
    inertia: Optional[float] = None
    inertia_history: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32).astype(np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ValueError("codebook needs at least 2 centroids")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]


@dataclass
class SegmentHistogram:
    segment_id: str
    bins: np.ndarray


def sample_frames(segments: Sequence[FrameMatrix], per_segment: int = DEFAULT_PER_SEGMENT,
                  seed: int = 0) -> np.ndarray:
    """Pick up to ``per_segment`` frames from each segment, without replacement.

    Selected rows keep their original order within a segment; segments are
    visited in the order given.
    """
    if len(segments) == 0:
        raise EmptyCorpus("no segments to sample from")
    rng = np.random.Generator(np.random.PCG64(seed))
    picked = []
    for seg in segments:
        if seg.n_frames <= per_segment:
            picked.append(seg.rows)
        else:
            idx = np.sort(rng.choice(seg.n_frames, size=per_segment, replace=False))
            picked.append(seg.rows[idx])
    return np.vstack(picked)


def _sq_dists(x: np.ndarray, c: np.ndarray, c_sq: np.ndarray) -> np.ndarray:
    # expanded form; clipped because rounding can push it slightly below zero
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    return np.maximum(d, 0.0)


def _assign(x: np.ndarray, c: np.ndarray):
    labels = np.empty(len(x), dtype=np.int64)
    c_sq = (c * c).sum(axis=1)
    for start in range(0, len(x), _CHUNK):
        labels[start:start + _CHUNK] = np.argmin(_sq_dists(x[start:start + _CHUNK], c, c_sq), axis=1)
    point_d2 = ((x - c[labels]) ** 2).sum(axis=1)
    return labels, point_d2


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a chosen centre
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rest[rng.integers(len(rest))])
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def train_kmeans(frames: np.ndarray, K: int = DEFAULT_K, max_iters: int = 50, tol: float = 1e-4,
                 seed: int = 0) -> Codebook:
    """Lloyd's k-means with k-means++ seeding.

    Stops once no centroid moves by ``tol`` or more (Euclidean), or after
    ``max_iters`` iterations.  A cluster that loses all its points is
    re-seeded with the point currently farthest from its own centroid.
    Inertia is checked to be non-increasing between iterations.
    """
    x = np.asarray(frames, dtype=np.float64)
    if len(x) < K:
        raise TooFewFrames(f"k-means needs at least K={K} frames, got {len(x)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = _kmeans_pp(x, K, rng)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        labels, point_d2 = _assign(x, centroids)
        counts = np.bincount(labels, minlength=K)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            for j in empty:
                p = int(np.argmax(point_d2))
                centroids[j] = x[p]
                labels[p] = j
                point_d2[p] = 0.0
            counts = np.bincount(labels, minlength=K)
        inertia = float(point_d2.sum())
        if history and inertia > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means inertia increased: {history[-1]} -> {inertia}")
        history.append(inertia)

        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        new = sums / counts[:, None]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        log.debug("k-means iter %d inertia %.6g shift %.3g", it, inertia, shift)
        if shift < tol:
            break
    _, point_d2 = _assign(x, centroids)
    return Codebook(centroids, train_seed=seed, iterations=it, inertia=float(point_d2.sum()),
                    inertia_history=history)


def _check_dim(d: int, cb: Codebook):
    if d != cb.D:
        raise DimensionMismatch(f"frame dimension {d} does not match codebook dimension {cb.D}")


def assign_bins(rows: np.ndarray, cb: Codebook) -> np.ndarray:
    """Nearest-centroid index for every row; ties go to the lowest index.

    Distances are computed from explicit differences (not the expanded
    dot-product form) so exact ties stay exact.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    _check_dim(rows.shape[1], cb)
    out = np.empty(len(rows), dtype=np.int64)
    step = max(1, (1 << 22) // (cb.K * cb.D))
    for start in range(0, len(rows), step):
        block = rows[start:start + step]
        d2 = ((block[:, None, :] - cb.centroids[None, :, :]) ** 2).sum(axis=2)
        out[start:start + step] = np.argmin(d2, axis=1)
    return out


def quantize(frame: np.ndarray, cb: Codebook) -> int:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1:
        raise DimensionMismatch("quantize expects a single frame vector")
    return int(assign_bins(frame[None, :], cb)[0])


def histogram(seg: FrameMatrix, cb: Codebook) -> SegmentHistogram:
    """Normalised bin occupancy of a segment's frames."""
    if seg.rows.shape[0] == 0:
        raise EmptySegment(f"{seg.segment_id}: no frames")
    counts = np.bincount(assign_bins(seg.rows, cb), minlength=cb.K)
    return SegmentHistogram(seg.segment_id, counts / seg.n_frames)


def write_codebook(path: Union[str, Path], cb: Codebook):
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<IIQ", cb.K, cb.D, cb.train_seed))
        fh.write(np.ascontiguousarray(cb.centroids, dtype="<f4").tobytes())


def read_codebook(path: Union[str, Path]) -> Codebook:
    data = Path(path).read_bytes()
    if data[:8] != CODEBOOK_MAGIC:
        raise CorruptFile(f"{path}: bad codebook magic")
    try:
        k, d, seed = struct.unpack_from("<IIQ", data, 8)
        c = np.frombuffer(data, dtype="<f4", count=k * d, offset=24).reshape(k, d)
    except (struct.error, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return Codebook(c, train_seed=seed)
