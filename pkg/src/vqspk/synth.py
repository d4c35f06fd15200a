"""Labelled synthetic speaker corpora and a brute-force second-order oracle.

Random streams: every draw comes from numpy's PCG64 generator.  The root
seed is expanded with ``SeedSequence(seed).spawn(num_speakers)``, giving one
independent child stream per speaker.  Within a speaker's stream the draw
order is fixed: mean vector, covariance basis, covariance eigenvalues, then
for each segment its frame count followed by its frames.  Adding speakers
therefore never changes the data of the existing ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import InvalidSpec
from .features import FrameMatrix
from .stats import SegmentStats, SoMetric, pair_score, segment_stats
from .vsm import Candidate

MAX_CONDITION = 100.0


@dataclass(frozen=True)
class SynthSpec:
    num_speakers: int = 20
    segments_per_speaker: int = 10
    frames_min: int = 150
    frames_max: int = 400
    dim: int = 26
    mean_spread: float = 10.0
    cov_scale: float = 1.0
    seed: int = 0

    def validate(self):
        if min(self.num_speakers, self.segments_per_speaker, self.frames_min, self.dim) < 1:
            raise InvalidSpec("all counts must be >= 1")
        if self.frames_max < self.frames_min:
            raise InvalidSpec("frames_max < frames_min")
        if not (self.mean_spread > 0 and self.cov_scale > 0):
            raise InvalidSpec("mean_spread and cov_scale must be positive")


@dataclass
class Speaker:
    label: str
    mean: np.ndarray
    cov: np.ndarray


def random_spd(rng: np.random.Generator, dim: int, scale: float,
               max_condition: float = MAX_CONDITION) -> np.ndarray:
    """Random orthogonal basis times log-uniform eigenvalues in [scale/sqrt(c), scale*sqrt(c)]."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    half = 0.5 * np.log(max_condition)
    eig = scale * np.exp(rng.uniform(-half, half, size=dim))
    cov = (q * eig) @ q.T
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise AssertionError("generated covariance is not positive definite")
    return cov


def generate(spec: SynthSpec) -> Tuple[List[FrameMatrix], Dict[str, str], List[Speaker]]:
    """Draw the corpus.  Returns (segments, segment_id -> speaker label, speakers)."""
    spec.validate()
    width = len(str(spec.num_speakers - 1))
    seg_width = len(str(spec.segments_per_speaker - 1))
    segments, labels, speakers = [], {}, []
    streams = np.random.SeedSequence(spec.seed).spawn(spec.num_speakers)
    for s, stream in enumerate(streams):
        rng = np.random.Generator(np.random.PCG64(stream))
        label = f"spk{s:0{width}d}"
        mean = rng.normal(0.0, spec.mean_spread, size=spec.dim)
        cov = random_spd(rng, spec.dim, spec.cov_scale)
        chol = np.linalg.cholesky(cov)
        speakers.append(Speaker(label, mean, cov))
        for j in range(spec.segments_per_speaker):
            n = int(rng.integers(spec.frames_min, spec.frames_max + 1))
            rows = mean + rng.standard_normal((n, spec.dim)) @ chol.T
            sid = f"{label}_seg{j:0{seg_width}d}"
            segments.append(FrameMatrix(sid, rows))
            labels[sid] = label
    return segments, labels, speakers


def brute_force_retrieve(query: SegmentStats, corpus: Sequence[SegmentStats], m2: SoMetric,
                         n: int) -> List[Candidate]:
    """Score the query against every other segment one pair at a time.

    Kept deliberately separate from the pipeline: it uses the plain pairwise
    measures and a Python sort, with no codebook, no first level and no
    batched scorer.
    """
    scored = []
    for other in corpus:
        if other.segment_id == query.segment_id:
            continue
        s = pair_score(query, other, m2)
        scored.append((-s if m2.higher_is_closer else s, other.segment_id, s))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [Candidate(sid, s) for _, sid, s in scored[:n]]


def corpus_stats(segments: Sequence[FrameMatrix]) -> List[SegmentStats]:
    return [segment_stats(seg) for seg in segments]
