"""Acceptance suite.

Each test covers one acceptance criterion and prints a single
``[PASS]`` / ``[FAIL]`` line; the lines are repeated in the terminal
summary.  Run with ``pytest tests/test_acceptance.py -v``.
"""

import time
from itertools import combinations

import numpy as np
import pytest

from vqspk.codebook import read_codebook, sample_frames, train_kmeans, write_codebook
from vqspk.pipeline import build_index, evaluate, read_index, retrieve, timing_report, write_index
from vqspk.stats import (SegmentStats, SoMetric, ahs, bic_penalty, delta_bic, divergence_shape,
                         hotelling_t2, segment_stats)
from vqspk.synth import SynthSpec, brute_force_retrieve, generate, random_spd
from vqspk.vsm import PAIRWISE, VsmMetric, top_k

ALL_M2 = [SoMetric(m) for m in ("bic", "ds", "ahs", "t2")]
REPORTS = []


def _index(spec, K, per_segment, seed=0):
    segs, labels, speakers = generate(spec)
    cb = train_kmeans(sample_frames(segs, per_segment, seed), K=K, seed=seed)
    return build_index(segs, cb, labels), speakers


def _evaluate(*args, **kw):
    rep = evaluate(*args, **kw)
    REPORTS.append(rep)
    return rep


def _monotone(rep):
    acc = rep.accuracy
    return acc[1] <= acc[3] <= acc[5]


def test_criterion_1_metric_properties(gate):
    with gate(1, "second-order metric properties on 200 PD pairs") as g:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        dims = (2, 4, 8, 26)
        worst = {"ds_sym": 0.0, "ds_self": 0.0, "ahs_scaled": 0.0, "literal": 0.0, "bic_self": 0.0}
        for i in range(200):
            d = dims[i % 4]
            c1 = random_spd(rng, d, float(rng.uniform(0.1, 10)), 100)
            c2 = random_spd(rng, d, float(rng.uniform(0.1, 10)), 100)
            assert np.linalg.cond(c1) <= 100 + 1e-9 and np.linalg.cond(c2) <= 100 + 1e-9

            ds12, ds21 = divergence_shape(c1, c2), divergence_shape(c2, c1)
            assert ds12 >= -1e-12
            worst["ds_sym"] = max(worst["ds_sym"], abs(ds12 - ds21))
            worst["ds_self"] = max(worst["ds_self"], divergence_shape(c1, c1))

            assert ahs(c1, c2) >= -1e-12
            worst["ahs_scaled"] = max(worst["ahs_scaled"], abs(ahs(c1, 3 * c1)))
            worst["literal"] = max(worst["literal"], abs(ahs(c1, c2, literal=True) - d / 2))

            mu = rng.normal(size=d)
            n1, n2 = int(rng.integers(d + 2, 400)), int(rng.integers(d + 2, 400))
            a = SegmentStats.from_cov("a", n1, mu, c1)
            b = SegmentStats.from_cov("b", n2, mu, c2)
            assert hotelling_t2(a, SegmentStats.from_cov("c", n2, rng.normal(size=d), c2)) >= 0
            assert abs(hotelling_t2(a, b)) <= 1e-12

            lam = float(rng.choice([0.5, 1.0, 2.0]))
            twin = SegmentStats.from_cov("a2", n1, mu, c1)
            got = delta_bic(a, twin, lam)
            worst["bic_self"] = max(worst["bic_self"], abs(got - lam * bic_penalty(d, 2 * n1)))

        assert worst["ds_sym"] <= 1e-9
        assert worst["ds_self"] <= 1e-12
        assert worst["ahs_scaled"] <= 1e-9
        assert worst["literal"] <= 1e-12
        assert worst["bic_self"] <= 1e-9

        # worked value: d=2, 100+100 frames, lambda=1
        x = np.random.default_rng(2).normal(size=(100, 2))
        s = segment_stats(x, "x")
        assert delta_bic(s, segment_stats(x, "y"), 1.0) == pytest.approx(2.5 * np.log(200), abs=1e-9)
        assert 2.5 * np.log(200) == pytest.approx(13.2458, abs=5e-5)

        elapsed = time.perf_counter() - t0
        g.note(", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
        g.note(f"{elapsed:.2f}s")
        assert elapsed < 10


def _rand_hist(rng, K):
    h = rng.dirichlet(np.full(K, 0.3))
    return h / h.sum()


def test_criterion_2_vsm(gate):
    with gate(2, "VSM measures on 1000 pairs and top_k vs full-sort oracle") as g:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2)
        K = 2048
        worst_l2 = 0.0
        for _ in range(1000):
            f, h = _rand_hist(rng, K), _rand_hist(rng, K)
            for metric, fn in PAIRWISE.items():
                v, w = fn(f, h), fn(h, f)
                assert v == w
                lo, hi = (0.0, 4.0) if metric is VsmMetric.NORMALIZED_L2 else (0.0, 1.0)
                assert lo - 1e-12 <= v <= hi + 1e-12
            worst_l2 = max(worst_l2, abs(PAIRWISE[VsmMetric.NORMALIZED_L2](f, h)
                                         - 2 * (1 - PAIRWISE[VsmMetric.COSINE](f, h))))
        assert worst_l2 <= 1e-12

        mismatches = 0
        for trial in range(100):
            hists = np.array([_rand_hist(rng, K) for _ in range(200)])
            ids = [f"seg{j:03d}" for j in rng.permutation(200)]
            q = _rand_hist(rng, K)
            metric = list(VsmMetric)[trial % 4]
            k = int(rng.integers(1, 201))
            fn = PAIRWISE[metric]
            sign = -1.0 if metric.higher_is_closer else 1.0
            oracle = sorted(range(200), key=lambda j: (sign * fn(q, hists[j]), ids[j]))[:k]
            got = top_k(q, ids, hists, k, metric)
            mismatches += [c.segment_id for c in got] != [ids[j] for j in oracle]
        assert mismatches == 0

        elapsed = time.perf_counter() - t0
        g.note(f"max |l2 - 2(1-cos)|={worst_l2:.1e}; top_k mismatches={mismatches}/100; {elapsed:.1f}s")
        assert elapsed < 30


@pytest.mark.slow
def test_criterion_3_oracle_equivalence(gate):
    with gate(3, "k1=199 two-level ranking equals brute force, 200 queries x 4 metrics") as g:
        t0 = time.perf_counter()
        spec = SynthSpec(20, 10, 150, 400, 26, 10.0, 1.0, seed=3)
        idx, _ = _index(spec, K=64, per_segment=50)
        assert len(idx) == 200
        diffs = 0
        for m2 in ALL_M2:
            for q in idx.ids:
                got = retrieve(q, idx, k1=199, m2=m2, n=199)
                want = brute_force_retrieve(idx.stats[idx.pos[q]], idx.stats, m2, n=199)
                diffs += [c.segment_id for c in got] != [c.segment_id for c in want]
        elapsed = time.perf_counter() - t0
        g.note(f"differing rankings={diffs}/800; {elapsed:.1f}s")
        assert diffs == 0
        assert elapsed < 120


def _min_separation(speakers):
    """Smallest Mahalanobis distance between two speaker means under the summed covariance."""
    best = np.inf
    for a, b in combinations(speakers, 2):
        delta = a.mean - b.mean
        best = min(best, float(np.sqrt(delta @ np.linalg.solve(a.cov + b.cov, delta))))
    return best


@pytest.mark.slow
def test_criterion_4_end_to_end_accuracy(gate):
    with gate(4, "synthetic end-to-end accuracy and BIC >= T2 ordering") as g:
        t0 = time.perf_counter()
        bic, t2 = SoMetric("bic", lam=1.0), SoMetric("t2")

        idx, speakers = _index(SynthSpec(20, 10, 150, 400, 26, 10.0, 1.0, seed=4), K=256, per_segment=100)
        sep = _min_separation(speakers)
        # segment means sit within a fraction of one unit of their speaker mean at 150+ frames
        assert sep >= 6.0
        rep = _evaluate(idx, k1=50, m1=VsmMetric.INTERSECTION, m2=bic)
        g.note(f"separated: min sep={sep:.1f}, 1-best={rep.accuracy[1]:.3f}, recall@50={rep.recall_at_k1:.3f}")
        assert rep.accuracy[1] >= 0.99
        assert rep.recall_at_k1 == 1.0

        ordering = []
        for spread, seeds in ((1.0, range(5)), (0.03, range(2))):
            for seed in seeds:
                idx, _ = _index(SynthSpec(20, 10, 150, 400, 26, spread, 1.0, seed=100 + seed),
                                K=256, per_segment=100)
                a = _evaluate(idx, k1=50, m2=bic).accuracy[1]
                b = _evaluate(idx, k1=50, m2=t2).accuracy[1]
                ordering.append((spread, seed, a, b))
        for spread in (1.0, 0.03):
            pairs = " ".join(f"{a:.2f}/{b:.2f}" for s, _, a, b in ordering if s == spread)
            g.note(f"spread={spread} BIC/T2 1-best: {pairs}")
        assert all(a >= b for _, _, a, b in ordering)

        elapsed = time.perf_counter() - t0
        g.note(f"{elapsed:.0f}s")
        assert elapsed < 300


def test_criterion_5_monotonicity_and_determinism(gate, tmp_path):
    with gate(5, "n-best monotonicity, byte-identical files, thread invariance") as g:
        spec = SynthSpec(20, 10, 150, 400, 26, 1.0, 1.0, seed=5)
        segs, labels, _ = generate(spec)
        paths = []
        for run in range(2):
            cb = train_kmeans(sample_frames(segs, 30, seed=9), K=64, seed=9)
            write_codebook(tmp_path / f"cb{run}.cbk", cb)
            idx = build_index(generate(spec)[0], read_codebook(tmp_path / f"cb{run}.cbk"), labels)
            write_index(tmp_path / f"ix{run}.idx", idx)
            paths.append((tmp_path / f"cb{run}.cbk", tmp_path / f"ix{run}.idx"))
        assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
        assert paths[0][1].read_bytes() == paths[1][1].read_bytes()

        idx = read_index(paths[0][1])
        for m1 in VsmMetric:
            for m2 in ALL_M2:
                one = _evaluate(idx, k1=20, m1=m1, m2=m2, threads=1)
                four = _evaluate(idx, k1=20, m1=m1, m2=m2, threads=4)
                assert one.outcome() == four.outcome()
        bad = [r for r in REPORTS if not _monotone(r)]
        g.note(f"{len(REPORTS)} evaluation runs checked, {len(bad)} non-monotone")
        assert not bad


@pytest.mark.slow
def test_criterion_6_speed_structure(gate):
    with gate(6, "two-level evaluation faster than brute force on 3000 segments") as g:
        idx, _ = _index(SynthSpec(300, 10, 100, 200, 26, 10.0, 1.0, seed=6), K=128, per_segment=30)
        assert len(idx) == 3000
        rep = timing_report(idx, k1=50, m1=VsmMetric.INTERSECTION, m2=SoMetric("bic"))
        assert _monotone(rep)
        g.note(f"two-level {rep.total_seconds:.1f}s vs brute force {rep.brute_force_seconds:.1f}s, "
               f"speedup {rep.speedup:.1f}x, speed ratio {rep.speed_ratio:.0f}x real time, "
               f"1-best {rep.accuracy[1]:.3f} vs {rep.brute_force_accuracy[1]:.3f}")
        assert rep.total_seconds < rep.brute_force_seconds
