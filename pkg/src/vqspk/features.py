"""MFCC + delta front end and the feature file format.

Audio comes in as 16 kHz / 16-bit mono PCM.  Each 25 ms frame (10 ms hop)
is pre-emphasised, Hamming-windowed and turned into 13 cepstra (c0..c12)
followed by their regression deltas, giving 26 values per frame.  Frames
far below the loudest frame of the segment are dropped afterwards.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.fft import dct

from .errors import CorruptFile, TooShort, UnsupportedFormat

SAMPLE_RATE = 16000
FRAME_LEN = 400  # 25 ms
FRAME_HOP = 160  # 10 ms
PRE_EMPHASIS = 0.97
N_FFT = 512
N_MELS = 26
N_CEPS = 13
DELTA_WIDTH = 2
LOG_FLOOR = 1e-10
DROP_DB = 30.0
FEATURE_DIM = 2 * N_CEPS

FEATURE_MAGIC = b"SPKFTR1\0"


@dataclass
class SampleBuffer:
    samples: np.ndarray  # int16
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FrameMatrix:
    """Feature rows for one segment.

    ``frame_times`` holds the start offset (seconds) of each row when it is
    known; it is ``None`` for matrices read back from feature files.
    """

    segment_id: str
    rows: np.ndarray
    frame_times: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ValueError(f"{self.segment_id}: expected a non-empty 2-D frame matrix")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError(f"{self.segment_id}: non-finite feature values")
        if self.frame_times is not None and len(self.frame_times) != self.rows.shape[0]:
            raise ValueError(f"{self.segment_id}: frame_times length does not match rows")

    @property
    def n_frames(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def load_wav(path: Union[str, Path]) -> SampleBuffer:
    """Read a 16 kHz, 16-bit, mono PCM WAV file without any conversion."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            if channels != 1 or width != 2 or rate != SAMPLE_RATE:
                raise UnsupportedFormat(
                    f"{path}: need mono 16-bit {SAMPLE_RATE} Hz PCM, "
                    f"got {channels} ch / {8 * width}-bit / {rate} Hz"
                )
            raw = wf.readframes(n)
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedFormat(f"{path}: {exc}") from exc
        raise CorruptFile(f"{path}: {exc}") from exc
    except (EOFError, struct.error) as exc:
        raise CorruptFile(f"{path}: truncated RIFF header") from exc
    if len(raw) != 2 * n:
        raise CorruptFile(f"{path}: data chunk truncated ({len(raw)} of {2 * n} bytes)")
    return SampleBuffer(np.frombuffer(raw, dtype="<i2").astype(np.int16), rate)


def write_wav(path: Union[str, Path], samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(np.asarray(samples, dtype="<i2").tobytes())


def raw_frames(buf: SampleBuffer) -> np.ndarray:
    """Slice the signal into un-weighted (n_frames, 400) float frames."""
    x = np.asarray(buf.samples, dtype=np.float64)
    if len(x) < FRAME_LEN:
        raise TooShort(f"need at least {FRAME_LEN} samples, got {len(x)}")
    n = (len(x) - FRAME_LEN) // FRAME_HOP + 1
    return np.lib.stride_tricks.sliding_window_view(x, FRAME_LEN)[::FRAME_HOP][:n].copy()


def frame_signal(buf: SampleBuffer) -> np.ndarray:
    """Frames ready for the FFT: per-frame pre-emphasis, then a Hamming window."""
    frames = raw_frames(buf)
    emph = frames.copy()
    emph[:, 1:] -= PRE_EMPHASIS * frames[:, :-1]
    return emph * np.hamming(FRAME_LEN)


def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mels, n_fft // 2 + 1)."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    bins = np.floor((n_fft + 1) * edges / sample_rate).astype(int)
    k = np.arange(n_fft // 2 + 1)
    fb = np.zeros((n_mels, len(k)))
    for m in range(n_mels):
        lo, mid, hi = bins[m], bins[m + 1], bins[m + 2]
        if mid > lo:
            rise = (k >= lo) & (k < mid)
            fb[m, rise] = (k[rise] - lo) / (mid - lo)
        if hi > mid:
            fall = (k >= mid) & (k < hi)
            fb[m, fall] = (hi - k[fall]) / (hi - mid)
    return fb


_FILTERS = mel_filterbank()


def mfcc_sequence(frames: np.ndarray) -> np.ndarray:
    """Cepstra c0..c12 for each windowed frame, shape (n_frames, 13)."""
    frames = np.atleast_2d(frames)
    power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2 / N_FFT
    energies = np.maximum(power @ _FILTERS.T, LOG_FLOOR)
    return dct(np.log(energies), type=2, axis=1, norm="ortho")[:, :N_CEPS]


def append_deltas(mfcc_rows: np.ndarray, width: int = DELTA_WIDTH) -> np.ndarray:
    """Concatenate regression deltas over +/-width frames (edges replicated)."""
    c = np.atleast_2d(np.asarray(mfcc_rows, dtype=np.float64))
    n = c.shape[0]
    padded = np.pad(c, ((width, width), (0, 0)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, width + 1))
    delta = np.zeros_like(c)
    for k in range(1, width + 1):
        delta += k * (padded[width + k:width + k + n] - padded[width - k:width - k + n])
    return np.hstack([c, delta / denom])


def frame_log_energy(raw: np.ndarray) -> np.ndarray:
    """Frame energies in dB (10*log10 of the sum of squares, floored)."""
    return 10.0 * np.log10(np.maximum(np.sum(np.asarray(raw, dtype=np.float64) ** 2, axis=1), LOG_FLOOR))


def filter_low_energy(frames: FrameMatrix, raw: np.ndarray, drop_db: float = DROP_DB) -> FrameMatrix:
    """Drop frames more than ``drop_db`` below the loudest frame of the segment.

    The loudest frame always survives, so the result is never empty.
    """
    energy = frame_log_energy(raw)
    if len(energy) != frames.n_frames:
        raise ValueError("raw frames and feature rows disagree in count")
    keep = energy >= energy.max() - drop_db
    times = None if frames.frame_times is None else frames.frame_times[keep]
    return FrameMatrix(frames.segment_id, frames.rows[keep], times)


def extract(buf: SampleBuffer, segment_id: str, drop_db: Optional[float] = DROP_DB) -> FrameMatrix:
    """Full front end: framing, MFCC, deltas and (unless ``drop_db`` is None) the energy gate."""
    raw = raw_frames(buf)
    windowed = frame_signal(buf)
    rows = append_deltas(mfcc_sequence(windowed))
    times = np.arange(len(rows)) * FRAME_HOP / buf.sample_rate
    fm = FrameMatrix(segment_id, rows, times)
    if drop_db is None:
        return fm
    return filter_low_energy(fm, raw, drop_db)


def write_features(path: Union[str, Path], fm: FrameMatrix):
    n, d = fm.rows.shape
    sid = fm.segment_id.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, d))
        fh.write(np.ascontiguousarray(fm.rows, dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(sid)))
        fh.write(sid)


def read_features(path: Union[str, Path]) -> FrameMatrix:
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise CorruptFile(f"{path}: bad feature file magic")
    try:
        n, d = struct.unpack_from("<II", data, 8)
        off = 16 + 4 * n * d
        rows = np.frombuffer(data, dtype="<f4", count=n * d, offset=16).reshape(n, d)
        (slen,) = struct.unpack_from("<I", data, off)
        sid = data[off + 4:off + 4 + slen]
        if len(sid) != slen:
            raise CorruptFile(f"{path}: truncated segment id")
        return FrameMatrix(sid.decode("utf-8"), rows.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
