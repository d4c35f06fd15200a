"""Index construction, two-level retrieval and n-best evaluation."""

from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .codebook import Codebook, histogram
from .errors import (CorruptFile, DuplicateSegmentId, EmptyIndex, MissingLabels, TooFewFrames,
                     UnknownSegmentId)
from .features import FRAME_HOP, SAMPLE_RATE, FrameMatrix
from .stats import SegmentStats, SoMetric, StatsBank, segment_stats
from .vsm import Candidate, VsmMetric, score_all

log = logging.getLogger(__name__)

INDEX_MAGIC = b"SPKIDX1\0"
DEFAULT_K1 = 50
N_BEST = (1, 3, 5)
FRAME_SECONDS = FRAME_HOP / SAMPLE_RATE


class RetrievalIndex:
    """Per-segment histograms and Gaussian statistics, read-only once built."""

    def __init__(self, ids: Sequence[str], hists: np.ndarray, stats: Sequence[SegmentStats],
                 labels: Optional[Sequence[Optional[str]]] = None, codebook: Optional[Codebook] = None,
                 build_config: Optional[dict] = None, skipped: Optional[list] = None):
        self.ids = list(ids)
        if len(set(self.ids)) != len(self.ids):
            dup = sorted({s for s in self.ids if self.ids.count(s) > 1})
            raise DuplicateSegmentId(f"duplicate segment ids: {dup[:5]}")
        self.hists = np.asarray(hists, dtype=np.float64)
        self.hists.setflags(write=False)
        self.stats = list(stats)
        self.labels = list(labels) if labels is not None else [None] * len(self.ids)
        if not (len(self.ids) == len(self.hists) == len(self.stats) == len(self.labels)):
            raise ValueError("index records are inconsistent")
        self.codebook = codebook
        self.build_config = dict(build_config or {})
        self.skipped = list(skipped or [])
        self.pos = {sid: i for i, sid in enumerate(self.ids)}
        ranks = np.empty(len(self.ids), dtype=np.int64)
        ranks[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(self.ids))
        self.id_rank = ranks
        self._banks: Dict[float, StatsBank] = {}

    def __len__(self):
        return len(self.ids)

    @property
    def K(self) -> int:
        return self.hists.shape[1]

    @property
    def D(self) -> int:
        return self.stats[0].dim if self.stats else 0

    @property
    def audio_seconds(self) -> float:
        return sum(s.n for s in self.stats) * FRAME_SECONDS

    def bank(self, ridge: float) -> StatsBank:
        if ridge not in self._banks:
            self._banks[ridge] = StatsBank(self.stats, ridge)
        return self._banks[ridge]


def build_index(segments: Sequence[FrameMatrix], cb: Codebook,
                labels: Optional[Mapping[str, str]] = None,
                build_config: Optional[dict] = None) -> RetrievalIndex:
    """Histogram and statistics for every segment.

    Segments with fewer than two frames are left out and listed in
    ``index.skipped`` as (segment_id, reason).
    """
    seen = set()
    ids, hists, stats, labs, skipped = [], [], [], [], []
    for seg in segments:
        if seg.segment_id in seen:
            raise DuplicateSegmentId(f"duplicate segment id {seg.segment_id!r}")
        seen.add(seg.segment_id)
        try:
            st = segment_stats(seg)
        except TooFewFrames as exc:
            log.warning("skipping %s: %s", seg.segment_id, exc)
            skipped.append((seg.segment_id, str(exc)))
            continue
        ids.append(seg.segment_id)
        hists.append(histogram(seg, cb).bins)
        stats.append(st)
        labs.append(None if labels is None else labels.get(seg.segment_id))
    cfg = {"K": cb.K, "codebook_seed": cb.train_seed}
    cfg.update(build_config or {})
    hists = np.vstack(hists) if hists else np.zeros((0, cb.K))
    return RetrievalIndex(ids, hists, stats, labs, cb, cfg, skipped)


@dataclass
class QueryResult:
    level1: List[int]  # index positions surviving the first level, closest first
    ranked: List[Candidate]
    level1_seconds: float = 0.0
    level2_seconds: float = 0.0


def _order(scores: np.ndarray, ok: np.ndarray, id_rank: np.ndarray, higher_is_closer: bool) -> np.ndarray:
    key = np.where(ok, -scores if higher_is_closer else scores, 0.0)
    return np.lexsort((id_rank, key, ~ok))


def _resolve_query(query: Union[str, FrameMatrix], index: RetrievalIndex, ridge: float):
    """Return (histogram, bank, bank position, excluded index position)."""
    if isinstance(query, str):
        if query not in index.pos:
            raise UnknownSegmentId(f"segment {query!r} is not in the index")
        q = index.pos[query]
        return index.hists[q], index.bank(ridge), q, q
    if index.codebook is None:
        raise ValueError("an external query needs the index's codebook")
    hist = histogram(query, index.codebook).bins
    qbank = StatsBank([segment_stats(query)], ridge)
    return hist, qbank, 0, index.pos.get(query.segment_id, -1)


def _two_level(query, index: RetrievalIndex, k1: int, m1: VsmMetric, m2: SoMetric) -> QueryResult:
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    t0 = time.perf_counter()
    hist, qbank, qpos, excluded = _resolve_query(query, index, m2.ridge)
    scores = score_all(hist, index.hists, m1)
    ok = np.ones(len(index), dtype=bool)
    order = _order(scores, ok, index.id_rank, m1.higher_is_closer)
    order = order[order != excluded][:k1]
    if len(order) == 0:
        raise EmptyIndex("no candidates besides the query")
    t1 = time.perf_counter()
    bank = index.bank(m2.ridge)
    s2, ok2 = bank.score(qpos, order, m2, query_bank=None if qbank is bank else qbank)
    final = order[_order(s2, ok2, index.id_rank[order], m2.higher_is_closer)]
    lookup = dict(zip(order.tolist(), zip(s2.tolist(), ok2.tolist())))
    ranked = [Candidate(index.ids[p], lookup[p][0], flagged=not lookup[p][1]) for p in final.tolist()]
    t2 = time.perf_counter()
    return QueryResult(order.tolist(), ranked, t1 - t0, t2 - t1)


def retrieve(query: Union[str, FrameMatrix], index: RetrievalIndex, k1: int = DEFAULT_K1,
             m1: VsmMetric = VsmMetric.INTERSECTION, m2: SoMetric = SoMetric(), n: int = 5) -> List[Candidate]:
    """Two-level query: top-``k1`` by histogram, then reranked by ``m2``; first ``n`` returned."""
    if not 1 <= n <= k1:
        raise ValueError(f"need 1 <= n <= k1, got n={n}, k1={k1}")
    return _two_level(query, index, k1, m1, m2).ranked[:n]


def second_order_only(query: Union[str, FrameMatrix], index: RetrievalIndex, m2: SoMetric) -> List[Candidate]:
    """Rank every other segment by ``m2`` alone (no first-level pruning)."""
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    _, qbank, qpos, excluded = _resolve_query(query, index, m2.ridge)
    bank = index.bank(m2.ridge)
    cand = np.array([p for p in range(len(index)) if p != excluded], dtype=np.int64)
    if len(cand) == 0:
        raise EmptyIndex("no candidates besides the query")
    s, ok = bank.score(qpos, cand, m2, query_bank=None if qbank is bank else qbank)
    order = _order(s, ok, index.id_rank[cand], m2.higher_is_closer)
    return [Candidate(index.ids[cand[i]], float(s[i]), flagged=not ok[i]) for i in order]


@dataclass
class EvalReport:
    metric1: str
    metric2: str
    k1: int
    queries: int
    hits: Dict[int, int]
    accuracy: Dict[int, float]
    recall_at_k1: float
    level1_seconds: float
    level2_seconds: float
    total_seconds: float
    audio_seconds: float
    threads: int
    brute_force_seconds: Optional[float] = None
    brute_force_accuracy: Dict[int, float] = field(default_factory=dict)

    @property
    def speed_ratio(self) -> Optional[float]:
        """Seconds of indexed audio processed per second of retrieval."""
        if self.audio_seconds <= 0 or self.total_seconds <= 0:
            return None
        return self.audio_seconds / self.total_seconds

    @property
    def speedup(self) -> Optional[float]:
        if self.brute_force_seconds is None or self.total_seconds <= 0:
            return None
        return self.brute_force_seconds / self.total_seconds

    def outcome(self) -> tuple:
        """Everything except wall-clock measurements; equal across thread counts."""
        return (self.metric1, self.metric2, self.k1, self.queries, tuple(sorted(self.hits.items())),
                tuple(sorted(self.accuracy.items())), self.recall_at_k1,
                tuple(sorted(self.brute_force_accuracy.items())))


def _check_labels(index: RetrievalIndex):
    missing = [sid for sid, lab in zip(index.ids, index.labels) if not lab]
    if missing:
        raise MissingLabels(f"{len(missing)} segments have no speaker label (first: {missing[0]!r})")


def _run_parallel(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _hits(ranked: Sequence[str], label: str, labels: Mapping[str, str], n_values) -> Dict[int, bool]:
    return {n: any(labels[sid] == label for sid in ranked[:n]) for n in n_values}


def evaluate(index: RetrievalIndex, k1: int = DEFAULT_K1, m1: VsmMetric = VsmMetric.INTERSECTION,
             m2: SoMetric = SoMetric(), n_values: Sequence[int] = N_BEST, threads: int = 1) -> EvalReport:
    """Use every segment as a query against the rest and score n-best hits.

    A query is a hit at n when at least one of its n best results has the
    query's speaker label.  ``recall_at_k1`` is the fraction of queries with
    at least one same-speaker segment among the first-level candidates.
    """
    _check_labels(index)
    n_values = tuple(sorted(set(n_values)))
    if n_values[0] < 1 or n_values[-1] > k1:
        raise ValueError(f"n-best values must lie in [1, k1={k1}]")
    if len(index) < 2:
        raise EmptyIndex("evaluation needs at least two segments")
    labels = dict(zip(index.ids, index.labels))
    index.bank(m2.ridge)

    def one(q: int):
        res = _two_level(index.ids[q], index, k1, m1, m2)
        lab = index.labels[q]
        ranked = [c.segment_id for c in res.ranked]
        recall = any(index.labels[p] == lab for p in res.level1)
        return _hits(ranked, lab, labels, n_values), recall, res.level1_seconds, res.level2_seconds

    t0 = time.perf_counter()
    results = _run_parallel(one, range(len(index)), threads)
    total = time.perf_counter() - t0
    hits = {n: sum(r[0][n] for r in results) for n in n_values}
    nq = len(results)
    return EvalReport(
        metric1=m1.value, metric2=m2.label, k1=k1, queries=nq, hits=hits,
        accuracy={n: hits[n] / nq for n in n_values},
        recall_at_k1=sum(r[1] for r in results) / nq,
        level1_seconds=sum(r[2] for r in results), level2_seconds=sum(r[3] for r in results),
        total_seconds=total, audio_seconds=index.audio_seconds, threads=threads)


def evaluate_brute_force(index: RetrievalIndex, m2: SoMetric = SoMetric(), n_values: Sequence[int] = N_BEST,
                         threads: int = 1) -> Tuple[Dict[int, float], float]:
    """n-best accuracy and wall-clock seconds of the unpruned second-order search."""
    _check_labels(index)
    labels = dict(zip(index.ids, index.labels))
    index.bank(m2.ridge)

    def one(q: int):
        ranked = [c.segment_id for c in second_order_only(index.ids[q], index, m2)[:max(n_values)]]
        return _hits(ranked, index.labels[q], labels, n_values)

    t0 = time.perf_counter()
    results = _run_parallel(one, range(len(index)), threads)
    seconds = time.perf_counter() - t0
    return {n: sum(r[n] for r in results) / len(results) for n in n_values}, seconds


def timing_report(index: RetrievalIndex, k1: int = DEFAULT_K1, m1: VsmMetric = VsmMetric.INTERSECTION,
                  m2: SoMetric = SoMetric(), n_values: Sequence[int] = N_BEST, threads: int = 1) -> EvalReport:
    """Evaluation plus a timed brute-force second-order baseline on the same index.

    Both runs use the same batched scorer, so the measured speedup reflects
    only the pruning done by the first level.
    """
    report = evaluate(index, k1, m1, m2, n_values, threads)
    acc, seconds = evaluate_brute_force(index, m2, n_values, threads)
    report.brute_force_seconds = seconds
    report.brute_force_accuracy = acc
    return report


def format_table(reports: Sequence[EvalReport]) -> str:
    """Aligned text table, one row per metric pair."""
    ns = sorted({n for r in reports for n in r.accuracy})
    header = ["Distance metric"] + [f"{n} best" for n in ns] + ["Full time of retrieval", "recall@k1",
                                                                 "speed ratio", "brute force", "speedup"]
    rows = []
    for r in reports:
        row = [f"{r.metric1} + {r.metric2}"] + [f"{100 * r.accuracy[n]:.1f}%" for n in ns]
        row.append(f"{r.total_seconds:.2f} sec.")
        row.append(f"{100 * r.recall_at_k1:.1f}% (k1={r.k1})")
        row.append("n/a" if r.speed_ratio is None else f"{r.speed_ratio:.1f}x")
        row.append("-" if r.brute_force_seconds is None else f"{r.brute_force_seconds:.2f} sec.")
        row.append("-" if r.speedup is None else f"{r.speedup:.1f}x")
        rows.append(row)
    widths = [max(len(x) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def format_csv(reports: Sequence[EvalReport]) -> str:
    ns = sorted({n for r in reports for n in r.accuracy})
    cols = (["metric1", "metric2", "k1", "queries"] + [f"best{n}" for n in ns]
            + ["full_time_sec", "recall_at_k1", "level1_sec", "level2_sec", "audio_sec", "speed_ratio",
               "brute_force_sec", "speedup", "threads"])
    out = [",".join(cols)]

    def fmt(x):
        return "" if x is None else (f"{x:.6g}" if isinstance(x, float) else str(x))

    for r in reports:
        vals = ([r.metric1, r.metric2, r.k1, r.queries] + [r.accuracy[n] for n in ns]
                + [r.total_seconds, r.recall_at_k1, r.level1_seconds, r.level2_seconds, r.audio_seconds,
                   r.speed_ratio, r.brute_force_seconds, r.speedup, r.threads])
        out.append(",".join(fmt(v) for v in vals))
    return "\n".join(out)


def read_labels(path: Union[str, Path]) -> Dict[str, str]:
    labels = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'segment_id<TAB>speaker_id'")
        labels[parts[0]] = parts[1]
    return labels


def write_labels(path: Union[str, Path], labels: Mapping[str, str]):
    with open(path, "w", encoding="utf-8") as fh:
        for sid, spk in labels.items():
            fh.write(f"{sid}\t{spk}\n")


def write_index(path: Union[str, Path], index: RetrievalIndex):
    d = index.D
    buf = [INDEX_MAGIC, struct.pack("<III", len(index), index.K, d)]
    for sid, lab, h, st in zip(index.ids, index.labels, index.hists, index.stats):
        sb = sid.encode("utf-8")
        lb = (lab or "").encode("utf-8")
        nz = np.flatnonzero(h)
        buf.append(struct.pack("<I", len(sb)) + sb)
        buf.append(struct.pack("<I", len(lb)) + lb)
        buf.append(struct.pack("<I", len(nz)))
        pairs = np.empty(len(nz), dtype=[("bin", "<u4"), ("val", "<f4")])
        pairs["bin"] = nz
        pairs["val"] = h[nz]
        buf.append(pairs.tobytes())
        buf.append(struct.pack("<Q", st.n))
        buf.append(np.ascontiguousarray(st.mean, dtype="<f8").tobytes())
        buf.append(np.ascontiguousarray(st.cov, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(buf))


def read_index(path: Union[str, Path], codebook: Optional[Codebook] = None) -> RetrievalIndex:
    """Load an index file.

    Histogram bins are stored at single precision; since every bin is a
    frame count divided by the segment's frame count, the exact values are
    recovered by rounding back to counts.
    """
    data = Path(path).read_bytes()
    if data[:8] != INDEX_MAGIC:
        raise CorruptFile(f"{path}: bad index magic")
    try:
        count, K, d = struct.unpack_from("<III", data, 8)
        off = 20
        ids, labels, hists, stats = [], [], [], []
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, off)
            sid = data[off + 4:off + 4 + ln].decode("utf-8")
            off += 4 + ln
            (ln,) = struct.unpack_from("<I", data, off)
            lab = data[off + 4:off + 4 + ln].decode("utf-8") or None
            off += 4 + ln
            (nnz,) = struct.unpack_from("<I", data, off)
            off += 4
            pairs = np.frombuffer(data, dtype=[("bin", "<u4"), ("val", "<f4")], count=nnz, offset=off)
            off += 8 * nnz
            (n,) = struct.unpack_from("<Q", data, off)
            off += 8
            mean = np.frombuffer(data, dtype="<f8", count=d, offset=off)
            off += 8 * d
            cov = np.frombuffer(data, dtype="<f8", count=d * d, offset=off).reshape(d, d)
            off += 8 * d * d
            h = np.zeros(K)
            h[pairs["bin"]] = np.round(pairs["val"].astype(np.float64) * n) / n
            ids.append(sid)
            labels.append(lab)
            hists.append(h)
            stats.append(SegmentStats.from_cov(sid, n, mean.copy(), cov))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if codebook is not None and codebook.K != K:
        raise CorruptFile(f"{path}: index has K={K} but codebook has K={codebook.K}")
    hists = np.vstack(hists) if hists else np.zeros((0, K))
    return RetrievalIndex(ids, hists, stats, labels, codebook)
