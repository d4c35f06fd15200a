import numpy as np
import pytest

from vqspk.codebook import sample_frames, train_kmeans
from vqspk.pipeline import build_index
from vqspk.synth import SynthSpec, generate


def make_index(spec: SynthSpec, K: int = 32, per_segment: int = 50, seed: int = 0):
    segs, labels, _ = generate(spec)
    cb = train_kmeans(sample_frames(segs, per_segment, seed), K=K, seed=seed)
    return build_index(segs, cb, labels), segs, labels


@pytest.fixture(scope="session")
def small_corpus():
    """6 speakers x 5 segments, 8-dimensional, moderately separated."""
    spec = SynthSpec(num_speakers=6, segments_per_speaker=5, frames_min=40, frames_max=90, dim=8,
                     mean_spread=1.5, cov_scale=1.0, seed=123)
    return make_index(spec, K=16)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)


ACCEPTANCE_LINES = []


class _Gate:
    """Context manager recording one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title, self.notes = number, title, []

    def note(self, text):
        self.notes.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.notes)
        if exc_type is not None:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{status}] criterion {self.number}: {self.title}" + (f" -- {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture
def gate():
    return _Gate


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: l.split("criterion ")[1]):
            terminalreporter.write_line(line)
