"""Two-level query-by-example speaker retrieval.

Segments are first ranked by their bag-of-frames histogram over a shared
k-means codebook; the closest ``k1`` are then reranked with a second-order
Gaussian measure (delta-BIC, divergence shape, AHS or Hotelling T^2).
"""

from .codebook import Codebook, SegmentHistogram, histogram, quantize, sample_frames, train_kmeans
from .features import FrameMatrix, SampleBuffer, extract, load_wav
from .pipeline import EvalReport, RetrievalIndex, build_index, evaluate, retrieve, timing_report
from .stats import SegmentStats, SoMetric, segment_stats
from .synth import SynthSpec, brute_force_retrieve, generate
from .vsm import Candidate, VsmMetric

__version__ = "0.1.0"
