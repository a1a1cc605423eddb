"""Seeded synthetic piano-like pieces and performance distortions.

Pieces are random walks over a diatonic scale with occasional chord
insertions, so that interval and rhythm statistics resemble tonal music more
than uniformly random notes do.
"""

import numpy as np

from .notes_io import NoteEvent, NoteSequence

MAJOR = (0, 2, 4, 5, 7, 9, 11)
MINOR = (0, 2, 3, 5, 7, 8, 10)
# note values in beats and their relative frequencies
RHYTHM = (0.5, 1.0, 1.5, 2.0, 0.25)
RHYTHM_P = (0.35, 0.35, 0.1, 0.12, 0.08)
STEPS = (-4, -3, -2, -1, 1, 2, 3, 4, 0)
STEPS_P = (0.04, 0.07, 0.16, 0.22, 0.22, 0.16, 0.07, 0.04, 0.02)


def _degree_to_pitch(tonic, scale, degree):
    octave, step = divmod(degree, len(scale))
    return tonic + 12 * octave + scale[step]


def generate_piece(rng, n_notes=300, piece_id="", bpm=None, chord_prob=0.2,
                   low=36, high=96):
    """Return a NoteSequence with about ``n_notes`` notes (exactly, after trimming)."""
    rng = np.random.default_rng(rng)
    bpm = float(rng.uniform(80, 140)) if bpm is None else float(bpm)
    beat = 60.0 / bpm
    scale = MAJOR if rng.random() < 0.6 else MINOR
    tonic = int(rng.integers(55, 67))
    degree = 0
    t_beats = 0.0
    events = []
    while len(events) < n_notes:
        degree += int(rng.choice(STEPS, p=STEPS_P))
        if rng.random() < 0.05:
            degree += int(rng.choice((-7, 7)))
        pitch = _degree_to_pitch(tonic, scale, degree)
        if pitch > high - 12:
            degree -= 7
        elif pitch < low + 12:
            degree += 7
        pitch = _degree_to_pitch(tonic, scale, degree)
        length = float(rng.choice(RHYTHM, p=RHYTHM_P))
        onset = t_beats * beat
        dur = length * beat * 0.95
        velocity = int(rng.integers(50, 110))
        events.append(NoteEvent(onset, pitch, dur, velocity))
        if rng.random() < chord_prob:
            # add a third and/or fifth below the melody note
            for below in rng.choice((2, 4, 7), size=int(rng.integers(1, 3)), replace=False):
                p = _degree_to_pitch(tonic, scale, degree - int(below))
                if low <= p <= high:
                    events.append(NoteEvent(onset, p, dur, max(1, velocity - 15)))
        t_beats += length
    events = sorted(events)[:n_notes]
    return NoteSequence(events, piece_id)


def generate_corpus(n_pieces, n_notes=300, seed=0, prefix="piece"):
    rng = np.random.default_rng(seed)
    width = len(str(n_pieces - 1))
    return [
        generate_piece(rng, n_notes, f"{prefix}{i:0{width}d}")
        for i in range(n_pieces)
    ]


def excerpt(seq, start, stop, rebase=True):
    """Notes with onset in ``[start, stop)``, optionally shifted to start at 0."""
    shift = start if rebase else 0.0
    events = [
        NoteEvent(e.onset - shift, e.pitch, e.duration, e.velocity)
        for e in seq if start <= e.onset < stop
    ]
    return NoteSequence(events, seq.id)


def perform(seq, rng, delete_frac=0.0, jitter=0.0, transpose=0, tempo=1.0):
    """Simulate an imperfect performance of ``seq``.

    Deletes a random ``delete_frac`` of the notes, scales time by ``tempo``,
    adds uniform onset jitter of ``±jitter`` seconds and transposes.
    Returned onsets are clipped at 0.
    """
    rng = np.random.default_rng(rng)
    keep = rng.random(len(seq)) >= delete_frac
    events = []
    for e, k in zip(seq, keep):
        if not k:
            continue
        onset = e.onset * tempo + (rng.uniform(-jitter, jitter) if jitter else 0.0)
        pitch = min(127, max(0, e.pitch + transpose))
        events.append(NoteEvent(max(0.0, onset), pitch, e.duration * tempo, e.velocity))
    return NoteSequence(events, seq.id)
