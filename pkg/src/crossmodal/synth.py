"""Additive-harmonic rendering of note sequences, plus 16-bit WAV I/O."""

import io
import math
import wave
from dataclasses import dataclass

import numpy as np

from .exceptions import DataError, EmptySequence, InvalidRate

DEFAULT_SAMPLE_RATE = 22050
DEFAULT_HARMONICS = 5
ATTACK_S = 0.010
DECAY_RATE = 1.5      # 1/s, exponential decay while the key is held
RELEASE_S = 0.5       # tail appended after the last note-off
RELEASE_TAU = 0.08    # s, exponential release after note-off
PEAK = 0.9


def pitch_to_hz(pitch):
    return 440.0 * 2.0 ** ((np.asarray(pitch, dtype=float) - 69.0) / 12.0)


def hz_to_pitch(freq):
    return 69.0 + 12.0 * np.log2(np.asarray(freq, dtype=float) / 440.0)


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 1:
            raise ValueError("AudioBuffer holds mono samples only")
        if self.sample_rate <= 0:
            raise InvalidRate(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate

    def __len__(self):
        return len(self.samples)


def _envelope(n_note, n_total, sr):
    t = np.arange(n_total) / sr
    env = np.exp(-DECAY_RATE * t)
    n_attack = min(max(1, int(round(ATTACK_S * sr))), n_total)
    env[:n_attack] *= np.arange(n_attack) / n_attack
    if n_total > n_note:
        env[n_note:] = env[n_note - 1] * np.exp(-(t[n_note:] - t[n_note - 1]) / RELEASE_TAU)
    return env


def render_audio(seq, sample_rate=DEFAULT_SAMPLE_RATE, num_harmonics=DEFAULT_HARMONICS):
    """Render ``seq`` as a mono additive-synthesis signal.

    Every note contributes harmonics ``h = 1..num_harmonics`` of its
    equal-tempered fundamental with amplitude ``1/h``; partials above Nyquist
    are skipped. A 0.5 s tail follows the last note-off and the mix is
    peak-normalized to 0.9.
    """
    if len(seq) == 0:
        raise EmptySequence("cannot render an empty note sequence")
    if int(sample_rate) != sample_rate or sample_rate < 8000:
        raise InvalidRate(f"sample rate must be an integer >= 8000, got {sample_rate}")
    if num_harmonics < 1:
        raise ValueError("num_harmonics must be >= 1")
    sr = int(sample_rate)
    n_out = int(math.ceil((seq.end_time + RELEASE_S) * sr))
    out = np.zeros(n_out)
    nyquist = sr / 2.0
    for e in seq:
        start = int(round(e.onset * sr))
        n_note = max(1, int(round(e.duration * sr)))
        n_total = min(n_note + int(RELEASE_S * sr), n_out - start)
        if n_total <= 0:
            continue
        t = np.arange(n_total) / sr
        f0 = float(pitch_to_hz(e.pitch))
        tone = np.zeros(n_total)
        for h in range(1, num_harmonics + 1):
            if f0 * h >= nyquist:
                break
            tone += np.sin(2 * np.pi * f0 * h * t) / h
        amp = e.velocity / 127.0
        out[start:start + n_total] += amp * tone * _envelope(min(n_note, n_total), n_total, sr)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= PEAK / peak
    return AudioBuffer(out, sr)


def wav_bytes(audio):
    """Encode as RIFF/WAVE, PCM 16-bit signed little-endian, mono."""
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(audio.sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def write_wav(audio, path):
    with open(path, "wb") as fh:
        fh.write(wav_bytes(audio))


def read_wav(source):
    """Read a 16-bit PCM WAV (path or bytes); multi-channel input is averaged."""
    fh = io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else open(source, "rb")
    try:
        with wave.open(fh, "rb") as w:
            if w.getsampwidth() != 2:
                raise DataError("only 16-bit PCM WAV is supported")
            channels = w.getnchannels()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"invalid WAV data: {exc}") from None
    finally:
        fh.close()
    pcm = np.frombuffer(raw, dtype="<i2").astype(float) / 32767.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return AudioBuffer(np.clip(pcm, -1.0, 1.0), rate)
