import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqspk.codebook import (Codebook, assign_bins, histogram, quantize, read_codebook, sample_frames,
                            train_kmeans, write_codebook)
from vqspk.errors import DimensionMismatch, EmptyCorpus, TooFewFrames
from vqspk.features import FrameMatrix


def _segments(counts, dim=26, seed=0):
    rng = np.random.default_rng(seed)
    return [FrameMatrix(f"s{i}", rng.normal(size=(n, dim))) for i, n in enumerate(counts)]


class TestSampleFrames:
    def test_counts_match_frame_arithmetic(self):
        # 100 frames per segment: 7874 segments would give 787400
        segs = _segments([150] * 20, dim=2)
        assert len(sample_frames(segs, 100, seed=1)) == 20 * 100
        assert 7874 * 100 == 787400

    def test_short_segment_taken_whole(self):
        segs = _segments([40], dim=3)
        np.testing.assert_array_equal(sample_frames(segs, 100, seed=0), segs[0].rows)

    def test_deterministic(self):
        segs = _segments([300, 120, 90], dim=4)
        a = sample_frames(segs, 100, seed=5)
        b = sample_frames(segs, 100, seed=5)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, sample_frames(segs, 100, seed=6))

    def test_without_replacement_and_in_order(self):
        seg = FrameMatrix("s", np.arange(500.0)[:, None])
        picked = sample_frames([seg], 100, seed=2)[:, 0]
        assert len(np.unique(picked)) == 100
        assert np.all(np.diff(picked) > 0)

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            sample_frames([], 100)


class TestKMeans:
    def test_exact_fit(self):
        x = np.random.default_rng(0).normal(size=(16, 5)).astype(np.float32).astype(np.float64)
        cb = train_kmeans(x, K=16, seed=3)
        np.testing.assert_array_equal(np.sort(cb.centroids, axis=0), np.sort(x, axis=0))
        assert cb.inertia == 0.0

    def test_two_blobs(self):
        rng = np.random.default_rng(11)
        a = rng.normal([5.0, 5.0], 0.3, size=(400, 2))
        b = rng.normal([-5.0, 0.0], 0.3, size=(300, 2))
        cb = train_kmeans(np.vstack([a, b]), K=2, seed=0)
        truth = np.array([a.mean(axis=0), b.mean(axis=0)])
        got = cb.centroids[np.argsort(-cb.centroids[:, 0])]
        np.testing.assert_allclose(got, truth, atol=0.1)

    def test_too_few_frames(self):
        with pytest.raises(TooFewFrames):
            train_kmeans(np.zeros((5, 3)), K=8)

    def test_inertia_non_increasing_and_deterministic(self):
        x = np.random.default_rng(4).normal(size=(2000, 6))
        a = train_kmeans(x, K=32, seed=9)
        b = train_kmeans(x, K=32, seed=9)
        assert a.centroids.tobytes() == b.centroids.tobytes()
        h = np.array(a.inertia_history)
        assert np.all(np.diff(h) <= 1e-9 * h[:-1])
        assert len(np.unique(a.centroids, axis=0)) == 32

    def test_duplicate_heavy_data_keeps_live_centroids(self):
        x = np.vstack([np.zeros((50, 2)), np.ones((50, 2)), np.random.default_rng(0).normal(size=(10, 2))])
        cb = train_kmeans(x, K=8, seed=1)
        assert len(np.unique(cb.centroids, axis=0)) == 8
        assert np.all(np.isfinite(cb.centroids))


class TestQuantize:
    def setup_method(self):
        self.cb = Codebook(np.arange(10 * 26, dtype=np.float64).reshape(10, 26) / 7.0)

    def test_centroid_maps_to_itself(self):
        for j in range(self.cb.K):
            assert quantize(self.cb.centroids[j], self.cb) == j

    def test_tie_goes_to_lowest_index(self):
        c = np.zeros((6, 2))
        c[2] = [1.0, 0.0]
        c[5] = [-1.0, 0.0]
        c[[0, 1, 3, 4]] = [[9, 9], [8, 8], [7, 7], [6, 6]]
        cb = Codebook(c)
        assert quantize(np.zeros(2), cb) == 2

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            quantize(np.zeros(25), self.cb)

    def test_trained_centroids_map_to_themselves(self):
        x = np.random.default_rng(8).normal(size=(600, 26))
        cb = train_kmeans(x, K=40, seed=0)
        np.testing.assert_array_equal(assign_bins(cb.centroids, cb), np.arange(40))


class TestHistogram:
    def test_single_bin(self):
        cb = Codebook(np.eye(8, 26) * 10)
        seg = FrameMatrix("s", np.tile(cb.centroids[5], (100, 1)))
        h = histogram(seg, cb)
        assert h.bins[5] == 1.0 and h.bins.sum() == 1.0

    def test_half_split(self):
        cb = Codebook(np.eye(8, 26) * 10)
        rows = np.vstack([np.tile(cb.centroids[1], (50, 1)), np.tile(cb.centroids[2], (50, 1))])
        h = histogram(FrameMatrix("s", rows), cb)
        assert h.bins[1] == 0.5 and h.bins[2] == 0.5

    @given(st.integers(1, 300), st.integers(0, 2**31))
    @settings(max_examples=40, deadline=None)
    def test_normalised(self, n, seed):
        rng = np.random.default_rng(seed)
        cb = Codebook(rng.normal(size=(32, 26)))
        h = histogram(FrameMatrix("s", rng.normal(size=(n, 26))), cb)
        assert abs(h.bins.sum() - 1.0) <= 1e-9
        assert np.all(h.bins >= 0)


def test_codebook_file_roundtrip(tmp_path):
    x = np.random.default_rng(2).normal(size=(300, 26))
    cb = train_kmeans(x, K=12, seed=77)
    write_codebook(tmp_path / "c.cbk", cb)
    raw = (tmp_path / "c.cbk").read_bytes()
    assert raw[:8] == b"SPKCBK1\0"
    assert len(raw) == 8 + 16 + 12 * 26 * 4
    back = read_codebook(tmp_path / "c.cbk")
    assert back.train_seed == 77
    assert back.centroids.tobytes() == cb.centroids.tobytes()
