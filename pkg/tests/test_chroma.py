import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossmodal.chroma import (NEUTRAL, AudioChroma, Chromagram, SymbolicChroma, audio_chromagram,
                               chroma_from_csv, chroma_to_csv, cyclic_shift, frame_norms,
                               normalize_frames, symbolic_chromagram)
from crossmodal.exceptions import BufferTooShort, DataError, EmptySequence
from crossmodal.notes_io import NoteEvent, NoteSequence, transpose
from crossmodal.synth import AudioBuffer, render_audio
from strategies import note_sequences


def one_note(pitch, onset=0.0, duration=1.0):
    return NoteSequence([NoteEvent(onset, pitch, duration)])


class TestSymbolic:
    def test_single_c(self):
        c = symbolic_chromagram(one_note(60), 10)
        assert len(c) == 10
        assert np.all(c.frames[:, 0] == 1.0) and np.all(c.frames[:, 1:] == 0.0)

    def test_single_a(self):
        c = symbolic_chromagram(one_note(69), 10)
        assert np.all(np.argmax(c.frames, axis=1) == 9)

    def test_dyad_equal_mass(self):
        seq = NoteSequence([NoteEvent(0, 60, 1.0), NoteEvent(0, 64, 1.0)])
        c = symbolic_chromagram(seq, 10)
        assert np.allclose(c.frames[:, 0], 1 / math.sqrt(2), atol=1e-12)
        assert np.array_equal(c.frames[:, 0], c.frames[:, 4])

    def test_overlap_fraction_weights(self):
        # C fills frame 0; E covers the last quarter of frame 0 and all of frame 1
        seq = NoteSequence([NoteEvent(0.0, 60, 0.1), NoteEvent(0.075, 64, 0.125)])
        c = symbolic_chromagram(seq, 10)
        raw = np.array([1.0, 0.25])
        assert c.frames[0, 0] == pytest.approx(raw[0] / np.linalg.norm(raw))
        assert c.frames[0, 4] == pytest.approx(raw[1] / np.linalg.norm(raw))
        assert np.array_equal(c.frames[1], np.eye(12)[4])

    def test_gap_frames_are_neutral(self):
        seq = NoteSequence([NoteEvent(0.0, 60, 0.1), NoteEvent(0.5, 62, 0.1)])
        c = symbolic_chromagram(seq, 10)
        assert np.array_equal(c.frames[2], NEUTRAL)

    def test_empty(self):
        with pytest.raises(EmptySequence):
            symbolic_chromagram(NoteSequence([]))

    @given(note_sequences(max_size=20), st.integers(0, 11))
    def test_transpose_is_cyclic_shift_exactly(self, seq, k):
        assume_range = max(seq.pitches) + k <= 127
        if not assume_range:
            k -= 12
        assert np.array_equal(symbolic_chromagram(transpose(seq, k), 10).frames,
                              cyclic_shift(symbolic_chromagram(seq, 10), k).frames)

    @given(note_sequences(max_size=20), st.sampled_from([5.0, 10.0, 22050 / 1024]))
    def test_unit_norm_frames(self, seq, rate):
        c = symbolic_chromagram(seq, rate)
        assert np.allclose(np.linalg.norm(c.frames, axis=1), 1.0, atol=1e-9)


class TestNormalize:
    def test_scaling(self):
        c = normalize_frames(Chromagram([[2.0] + [0.0] * 11], 1.0))
        assert np.array_equal(c.frames[0], np.eye(12)[0])

    def test_zero_frame(self):
        c = normalize_frames(Chromagram(np.zeros((1, 12)), 1.0))
        assert np.array_equal(c.frames[0], NEUTRAL)
        assert np.linalg.norm(c.frames[0]) == pytest.approx(1.0, abs=1e-15)

    def test_below_eps_is_neutral(self):
        c = normalize_frames(Chromagram(np.full((1, 12), 1e-8), 1.0), eps=1e-6)
        assert np.array_equal(c.frames[0], NEUTRAL)

    @given(st.lists(st.floats(0, 10), min_size=12, max_size=12))
    def test_idempotent(self, row):
        once = normalize_frames(Chromagram([row], 1.0))
        twice = normalize_frames(once)
        assert np.allclose(once.frames, twice.frames, atol=1e-12)

    def test_norm_is_permutation_invariant(self, rng):
        frames = rng.random((20, 12))
        for s in range(12):
            assert np.array_equal(frame_norms(np.roll(frames, s, axis=1)), frame_norms(frames))


class TestShift:
    def test_rotation(self):
        c = Chromagram([np.eye(12)[0]], 1.0)
        assert np.array_equal(cyclic_shift(c, 4).frames[0], np.eye(12)[4])

    def test_period_and_group(self, rng):
        c = Chromagram(rng.random((5, 12)), 1.0)
        assert np.array_equal(cyclic_shift(c, 12).frames, c.frames)
        assert np.array_equal(cyclic_shift(cyclic_shift(c, 5), 7).frames, c.frames)
        assert np.array_equal(cyclic_shift(c, -3).frames, cyclic_shift(c, 9).frames)


def sine(freq, seconds=1.0, rate=22050):
    t = np.arange(int(seconds * rate)) / rate
    return AudioBuffer(0.5 * np.sin(2 * np.pi * freq * t), rate)


def stft_argmax_oracle(audio, window, hop):
    """Chroma argmax per frame from a loop-based DFT binning."""
    out = []
    win = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window) / window)
    freqs = np.arange(window // 2 + 1) * audio.sample_rate / window
    for start in range(0, len(audio.samples) - window + 1, hop):
        spec = np.abs(np.fft.rfft(audio.samples[start:start + window] * win)) ** 2
        bins = np.zeros(12)
        for f, power in zip(freqs, spec):
            if f <= 0:
                continue
            p = 69 + 12 * math.log2(f / 440)
            if 20.5 <= p <= 108.5:
                bins[int(round(p)) % 12] += power
        out.append(int(np.argmax(bins)))
    return out


class TestAudio:
    @pytest.mark.parametrize("freq,expected", [(440.0, 9), (261.63, 0)])
    def test_pure_sine(self, freq, expected):
        audio = sine(freq)
        c = audio_chromagram(audio, 4096, 1024)
        assert c.frame_rate == 22050 / 1024
        got = np.argmax(c.frames, axis=1)
        assert np.all(got == expected)
        assert got.tolist() == stft_argmax_oracle(audio, 4096, 1024)

    def test_silence_is_neutral(self):
        c = audio_chromagram(AudioBuffer(np.zeros(8192), 22050))
        assert np.array_equal(c.frames, np.tile(NEUTRAL, (len(c), 1)))

    def test_frame_count(self):
        c = audio_chromagram(AudioBuffer(np.zeros(10000), 22050), 4096, 1024)
        assert len(c) == 1 + (10000 - 4096) // 1024

    def test_too_short(self):
        with pytest.raises(BufferTooShort):
            audio_chromagram(AudioBuffer(np.zeros(100), 22050))

    @pytest.mark.parametrize("window,hop", [(1000, 100), (128, 64), (1024, 0), (1024, 2048)])
    def test_bad_parameters(self, window, hop):
        with pytest.raises(ValueError):
            audio_chromagram(AudioBuffer(np.zeros(4096), 22050), window, hop)

    @pytest.mark.parametrize("pitch", [36, 49, 60, 66, 71, 83])
    def test_rendered_note_interior_frames(self, pitch):
        audio = render_audio(one_note(pitch, 0.0, 1.5), 22050, 1)
        c = audio_chromagram(audio, 4096, 1024)
        interior = c.frames[2:int(1.5 * c.frame_rate) - 4]
        assert np.all(np.argmax(interior, axis=1) == pitch % 12)
        assert np.allclose(np.linalg.norm(c.frames, axis=1), 1.0, atol=1e-9)


class TestCsvAndEstimators:
    def test_round_trip(self, rng):
        c = normalize_frames(Chromagram(rng.random((7, 12)), 22050 / 1024))
        back = chroma_from_csv(chroma_to_csv(c))
        assert back.frame_rate == c.frame_rate
        assert np.array_equal(back.frames, c.frames)

    @pytest.mark.parametrize("text", ["1,2,3\n", "# frame_rate=10\n1,2\n", "# frame_rate=10\na," + "0," * 11])
    def test_bad_csv(self, text):
        with pytest.raises(DataError):
            chroma_from_csv(text)

    def test_chromagram_validation(self):
        with pytest.raises(DataError):
            Chromagram(np.zeros((3, 11)), 1.0)
        with pytest.raises(DataError):
            Chromagram(-np.ones((3, 12)), 1.0)

    def test_transformers(self):
        seq = one_note(60)
        out = SymbolicChroma(frame_rate=10).fit().transform([seq])
        assert np.array_equal(out[0].frames, symbolic_chromagram(seq, 10).frames)
        audio = sine(440.0)
        est = AudioChroma()
        assert est.get_params() == {"window_size": 4096, "hop": 1024, "eps": 1e-6}
        assert np.array_equal(est.fit_transform([audio])[0].frames, audio_chromagram(audio).frames)
