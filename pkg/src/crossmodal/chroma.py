"""Chromagrams from symbolic notes and audio, normalization and cyclic shifts."""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_positive
from .exceptions import BufferTooShort, DataError, EmptySequence
from .synth import DEFAULT_SAMPLE_RATE, hz_to_pitch, pitch_to_hz

N_CHROMA = 12
NEUTRAL = np.full(N_CHROMA, 1.0 / math.sqrt(N_CHROMA))
DEFAULT_EPS = 1e-6
DEFAULT_WINDOW = 4096
DEFAULT_HOP = 1024
# symbolic frame rate matching the default STFT hop at 22050 Hz
DEFAULT_FRAME_RATE = DEFAULT_SAMPLE_RATE / DEFAULT_HOP
PITCH_LO, PITCH_HI = 21, 108

CHROMA_NAMES = ("C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B")


@dataclass(frozen=True)
class Chromagram:
    """Sequence of 12-bin chroma frames, shape ``(n_frames, 12)``."""

    frames: np.ndarray
    frame_rate: float

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 2 or frames.shape[1] != N_CHROMA:
            raise DataError(f"chroma frames must have shape (n, 12), got {frames.shape}")
        if not np.all(np.isfinite(frames)) or np.any(frames < 0):
            raise DataError("chroma values must be finite and non-negative")
        if not self.frame_rate > 0:
            raise DataError("frame_rate must be positive")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]

    @property
    def duration(self):
        return len(self) / self.frame_rate

    def slice(self, start, stop):
        return Chromagram(self.frames[start:stop], self.frame_rate)


def frame_norms(frames):
    """Permutation-invariant L2 norms of each row.

    Squares are summed in sorted order so a cyclic shift of the bins yields
    bit-identical norms.
    """
    sq = np.sort(np.square(frames), axis=1)
    return np.sqrt(sq.sum(axis=1))


def _normalize(frames, eps):
    norms = frame_norms(frames)
    out = np.empty_like(frames)
    ok = norms >= eps
    out[ok] = frames[ok] / norms[ok, None]
    out[~ok] = NEUTRAL
    return out


def normalize_frames(c, eps=DEFAULT_EPS):
    """Scale each frame to unit norm; frames with norm below ``eps`` become neutral."""
    check_positive(eps, "eps")
    return Chromagram(_normalize(c.frames, eps), c.frame_rate)


def cyclic_shift(c, s):
    """Move the content of bin ``b`` to bin ``(b + s) mod 12`` in every frame."""
    return Chromagram(np.roll(c.frames, int(s) % N_CHROMA, axis=1), c.frame_rate)


def symbolic_chromagram(seq, frame_rate=DEFAULT_FRAME_RATE, eps=DEFAULT_EPS):
    """Chromagram of a note sequence.

    Frame ``i`` spans ``[i/frame_rate, (i+1)/frame_rate)``. Each note adds
    the fraction of the frame it overlaps to bin ``pitch % 12``.
    """
    check_positive(frame_rate, "frame_rate")
    if len(seq) == 0:
        raise EmptySequence("cannot compute a chromagram of an empty sequence")
    n_frames = max(1, int(math.ceil(seq.end_time * frame_rate - 1e-9)))
    frames = np.zeros((n_frames, N_CHROMA))
    for e in seq:
        first = int(math.floor(e.onset * frame_rate))
        last = min(n_frames, int(math.ceil(e.offset * frame_rate - 1e-9)))
        if last <= first:
            last = min(first + 1, n_frames)
        idx = np.arange(first, last)
        lo = np.maximum(idx / frame_rate, e.onset)
        hi = np.minimum((idx + 1) / frame_rate, e.offset)
        weight = np.clip(hi - lo, 0.0, None) * frame_rate
        frames[idx, e.pitch % N_CHROMA] += weight
    return Chromagram(_normalize(frames, eps), frame_rate)


def _pitch_class_map(window_size, sample_rate):
    freqs = np.arange(window_size // 2 + 1) * sample_rate / window_size
    fmin, fmax = pitch_to_hz(PITCH_LO - 0.5), pitch_to_hz(PITCH_HI + 0.5)
    mapping = np.zeros((freqs.size, N_CHROMA))
    sel = np.flatnonzero((freqs >= fmin) & (freqs <= fmax))
    pitches = np.round(hz_to_pitch(freqs[sel])).astype(int)
    mapping[sel, pitches % N_CHROMA] = 1.0
    return mapping


def stft_magnitude(samples, window_size, hop):
    """Hann-windowed magnitude STFT, frames starting at sample 0 (no padding)."""
    n_frames = 1 + (len(samples) - window_size) // hop
    idx = np.arange(window_size)[None, :] + hop * np.arange(n_frames)[:, None]
    window = np.hanning(window_size + 1)[:-1]  # periodic Hann
    return np.abs(np.fft.rfft(samples[idx] * window, axis=1))


def audio_chromagram(audio, window_size=DEFAULT_WINDOW, hop=DEFAULT_HOP, eps=DEFAULT_EPS):
    """Chromagram of an audio buffer by nearest-pitch binning of STFT power."""
    if window_size < 256 or window_size & (window_size - 1):
        raise ValueError(f"window_size must be a power of two >= 256, got {window_size}")
    if not 0 < hop <= window_size:
        raise ValueError(f"hop must be in (0, window_size], got {hop}")
    if len(audio.samples) < window_size:
        raise BufferTooShort(f"{len(audio.samples)} samples < window of {window_size}")
    power = stft_magnitude(audio.samples, window_size, hop) ** 2
    frames = power @ _pitch_class_map(window_size, audio.sample_rate)
    return Chromagram(_normalize(frames, eps), audio.sample_rate / hop)


# --------------------------------------------------------------------------
# serialization

def chroma_to_csv(c):
    lines = [f"# frame_rate={c.frame_rate!r}"]
    for row in c.frames:
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def chroma_from_csv(text):
    frame_rate = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "frame_rate":
                frame_rate = float(value)
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric chroma value") from None
        if len(row) != N_CHROMA:
            raise DataError(f"line {lineno}: expected 12 columns, got {len(row)}")
        rows.append(row)
    if frame_rate is None:
        raise DataError("missing '# frame_rate=<fps>' header")
    return Chromagram(np.array(rows).reshape(-1, N_CHROMA), frame_rate)


# --------------------------------------------------------------------------
# estimator wrappers

class SymbolicChroma(TransformerMixin, BaseEstimator):
    """Transformer mapping note sequences to chromagrams.

    Stateless; ``fit`` only validates parameters.
    """

    def __init__(self, frame_rate=DEFAULT_FRAME_RATE, eps=DEFAULT_EPS):
        self.frame_rate = frame_rate
        self.eps = eps

    def fit(self, X=None, y=None):
        check_positive(self.frame_rate, "frame_rate")
        check_positive(self.eps, "eps")
        return self

    def transform(self, X):
        return [symbolic_chromagram(seq, self.frame_rate, self.eps) for seq in X]


class AudioChroma(TransformerMixin, BaseEstimator):
    def __init__(self, window_size=DEFAULT_WINDOW, hop=DEFAULT_HOP, eps=DEFAULT_EPS):
        self.window_size = window_size
        self.hop = hop
        self.eps = eps

    def fit(self, X=None, y=None):
        check_positive(self.eps, "eps")
        return self

    def transform(self, X):
        return [audio_chromagram(a, self.window_size, self.hop, self.eps) for a in X]
