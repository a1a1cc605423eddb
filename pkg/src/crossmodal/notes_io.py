"""Symbolic note events: data model, CSV/MIDI parsing and simple transforms."""

import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import (
    BadHeader,
    DanglingNoteOn,
    MalformedLine,
    NonPositiveFactor,
    PitchOutOfRange,
    TruncatedChunk,
    UnsupportedFormat,
)

DEFAULT_TEMPO_US = 500_000  # 120 BPM


@dataclass(frozen=True, order=True)
class NoteEvent:
    onset: float
    pitch: int
    duration: float
    velocity: int = 80

    def __post_init__(self):
        if not (0 <= self.pitch <= 127):
            raise PitchOutOfRange(f"pitch {self.pitch} outside 0..127")
        if not (math.isfinite(self.onset) and self.onset >= 0):
            raise ValueError(f"onset must be finite and >= 0, got {self.onset}")
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ValueError(f"duration must be finite and > 0, got {self.duration}")
        if not (1 <= self.velocity <= 127):
            raise ValueError(f"velocity {self.velocity} outside 1..127")

    @property
    def offset(self):
        return self.onset + self.duration


@dataclass(frozen=True)
class NoteSequence:
    """Immutable, sorted list of note events with a document id.

    Events are kept sorted by ``(onset, pitch)``; duration and velocity only
    break remaining ties so that ordering is total and deterministic.
    """

    events: tuple = ()
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events)))

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, item):
        return self.events[item]

    @property
    def onsets(self):
        return np.array([e.onset for e in self.events], dtype=float)

    @property
    def pitches(self):
        return np.array([e.pitch for e in self.events], dtype=int)

    @property
    def end_time(self):
        return max((e.offset for e in self.events), default=0.0)

    def with_id(self, doc_id):
        return NoteSequence(self.events, doc_id)


# --------------------------------------------------------------------------
# CSV

def parse_note_csv(text, doc_id=""):
    """Parse ``onset,duration,pitch,velocity`` lines into a NoteSequence.

    Blank lines and lines starting with ``#`` are skipped. Any other line
    must hold exactly four numeric fields within the NoteEvent ranges.
    """
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise MalformedLine(lineno, f"expected 4 fields, got {len(parts)}")
        try:
            onset = float(parts[0])
            duration = float(parts[1])
            pitch_f = float(parts[2])
            vel_f = float(parts[3])
        except ValueError:
            raise MalformedLine(lineno, "non-numeric field") from None
        for name, value in (("pitch", pitch_f), ("velocity", vel_f)):
            if not math.isfinite(value) or value != int(value):
                raise MalformedLine(lineno, f"{name} must be an integer")
        try:
            events.append(NoteEvent(onset, int(pitch_f), duration, int(vel_f)))
        except ValueError as exc:
            raise MalformedLine(lineno, str(exc)) from None
    return NoteSequence(events, doc_id)


def serialize_note_csv(seq):
    lines = ["# onset,duration,pitch,velocity"]
    for e in seq:
        lines.append(f"{e.onset!r},{e.duration!r},{e.pitch},{e.velocity}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# MIDI

def _read_varlen(data, pos, end):
    value = 0
    for _ in range(4):
        if pos >= end:
            raise TruncatedChunk("variable-length quantity runs past chunk end")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos
    raise TruncatedChunk("variable-length quantity longer than 4 bytes")


def _iter_chunks(data):
    pos = 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise TruncatedChunk("incomplete chunk header")
        kind = data[pos:pos + 4]
        (length,) = struct.unpack(">I", data[pos + 4:pos + 8])
        start = pos + 8
        if start + length > len(data):
            raise TruncatedChunk(f"chunk {kind!r} declares {length} bytes, "
                                 f"only {len(data) - start} available")
        yield kind, start, start + length
        pos = start + length


def _parse_track(data, pos, end):
    """Yield ``(tick, kind, payload)`` for note and tempo events of one track."""
    tick = 0
    status = None
    out = []
    while pos < end:
        delta, pos = _read_varlen(data, pos, end)
        tick += delta
        if pos >= end:
            raise TruncatedChunk("event missing after delta time")
        byte = data[pos]
        if byte == 0xFF:
            if pos + 2 > end:
                raise TruncatedChunk("truncated meta event")
            meta_type = data[pos + 1]
            length, pos = _read_varlen(data, pos + 2, end)
            if pos + length > end:
                raise TruncatedChunk("meta event runs past chunk end")
            payload = data[pos:pos + length]
            pos += length
            if meta_type == 0x51 and length == 3:
                out.append((tick, "tempo", int.from_bytes(payload, "big")))
            elif meta_type == 0x2F:
                break
            continue
        if byte in (0xF0, 0xF7):
            length, pos = _read_varlen(data, pos + 1, end)
            if pos + length > end:
                raise TruncatedChunk("sysex runs past chunk end")
            pos += length
            continue
        if byte & 0x80:
            status = byte
            pos += 1
        elif status is None:
            raise TruncatedChunk("running status without a prior status byte")
        kind = status & 0xF0
        channel = status & 0x0F
        nbytes = 1 if kind in (0xC0, 0xD0) else 2
        if pos + nbytes > end:
            raise TruncatedChunk("channel event runs past chunk end")
        args = data[pos:pos + nbytes]
        pos += nbytes
        if kind == 0x90 and args[1] > 0:
            out.append((tick, "on", (channel, args[0] & 0x7F, args[1] & 0x7F)))
        elif kind == 0x80 or (kind == 0x90 and args[1] == 0):
            out.append((tick, "off", (channel, args[0] & 0x7F)))
    return out, tick


class _TempoMap:
    def __init__(self, tempo_events, division):
        self.division = division
        changes = sorted(tempo_events)
        if not changes or changes[0][0] != 0:
            changes.insert(0, (0, DEFAULT_TEMPO_US))
        self.ticks = []
        self.seconds = []
        self.tempi = []
        t_sec = 0.0
        prev_tick, prev_tempo = 0, changes[0][1]
        for tick, tempo in changes:
            t_sec += (tick - prev_tick) * prev_tempo / 1e6 / division
            self.ticks.append(tick)
            self.seconds.append(t_sec)
            self.tempi.append(tempo)
            prev_tick, prev_tempo = tick, tempo

    def __call__(self, tick):
        i = np.searchsorted(self.ticks, tick, side="right") - 1
        return self.seconds[i] + (tick - self.ticks[i]) * self.tempi[i] / 1e6 / self.division


def parse_midi(data, doc_id=""):
    """Read note events from a Standard MIDI File (format 0 or 1).

    Tick times are converted with the file's tempo map (120 BPM when no
    tempo event is present). Channel and program information is dropped.
    A note-on without a matching note-off is closed at the end of its
    track and a :class:`DanglingNoteOn` warning is issued.
    """
    data = bytes(data)
    if len(data) < 14 or data[:4] != b"MThd":
        raise BadHeader("missing MThd header")
    chunks = _iter_chunks(data)
    _, hstart, hend = next(chunks)
    if hend - hstart < 6:
        raise BadHeader("header chunk shorter than 6 bytes")
    fmt, ntracks, division = struct.unpack(">HHH", data[hstart:hstart + 6])
    if fmt == 2:
        raise UnsupportedFormat(2)
    if fmt not in (0, 1):
        raise BadHeader(f"unknown format {fmt}")
    if division & 0x8000:
        fps = 256 - (division >> 8)
        ticks_per_frame = division & 0xFF
        # SMPTE: fixed ticks per second, expressed as a constant tempo map
        division_eff = fps * ticks_per_frame
        smpte = True
    else:
        division_eff = division
        smpte = False
    if division_eff == 0:
        raise BadHeader("zero time division")

    tracks = []
    for kind, start, end in chunks:
        if kind != b"MTrk":
            continue
        tracks.append(_parse_track(data, start, end))
    if len(tracks) < ntracks:
        raise TruncatedChunk(f"header announces {ntracks} tracks, found {len(tracks)}")

    tempo_events = [] if smpte else [
        (tick, val) for evs, _ in tracks for tick, kind, val in evs if kind == "tempo"
    ]
    tempo_map = _TempoMap(tempo_events, division_eff) if not smpte else None

    def to_sec(tick):
        return tick / division_eff if smpte else tempo_map(tick)

    events = []
    for evs, last_tick in tracks:
        active = {}
        for tick, kind, val in evs:
            if kind == "on":
                channel, pitch, vel = val
                key = (channel, pitch)
                if key in active:
                    _close(events, active.pop(key), tick, pitch, to_sec)
                active[key] = (tick, vel)
            elif kind == "off":
                key = val
                if key in active:
                    _close(events, active.pop(key), tick, key[1], to_sec)
        for (channel, pitch), started in sorted(active.items()):
            warnings.warn(DanglingNoteOn(pitch), stacklevel=2)
            _close(events, started, last_tick, pitch, to_sec)
    return NoteSequence(events, doc_id)


def _close(events, started, end_tick, pitch, to_sec):
    start_tick, vel = started
    onset = to_sec(start_tick)
    duration = to_sec(end_tick) - onset
    if duration > 0:
        events.append(NoteEvent(onset, pitch, duration, vel))


def _varlen(value):
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_midi(seq, ppq=480, tempo_us=DEFAULT_TEMPO_US):
    """Encode a NoteSequence as a format-0 Standard MIDI File."""
    sec_per_tick = tempo_us / 1e6 / ppq
    msgs = []
    for e in seq:
        on = int(round(e.onset / sec_per_tick))
        off = max(on + 1, int(round(e.offset / sec_per_tick)))
        # note-offs sort before note-ons at the same tick
        msgs.append((on, 1, bytes([0x90, e.pitch, e.velocity])))
        msgs.append((off, 0, bytes([0x80, e.pitch, 0])))
    msgs.sort(key=lambda m: (m[0], m[1], m[2]))
    body = bytearray(b"\x00\xff\x51\x03" + tempo_us.to_bytes(3, "big"))
    now = 0
    for tick, _, msg in msgs:
        body += _varlen(tick - now) + msg
        now = tick
    body += b"\x00\xff\x2f\x00"
    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, ppq)
    return header + b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


# --------------------------------------------------------------------------
# transforms

def transpose(seq, semitones):
    semitones = int(semitones)
    if semitones == 0:
        return seq
    lo = min((e.pitch for e in seq), default=0)
    hi = max((e.pitch for e in seq), default=0)
    if seq.events and (lo + semitones < 0 or hi + semitones > 127):
        raise PitchOutOfRange(f"transposing by {semitones} leaves MIDI range")
    return NoteSequence([replace(e, pitch=e.pitch + semitones) for e in seq], seq.id)


def time_scale(seq, factor):
    if not (factor > 0) or not math.isfinite(factor):
        raise NonPositiveFactor(f"time scale factor must be > 0, got {factor}")
    if factor == 1:
        return seq
    return NoteSequence(
        [replace(e, onset=e.onset * factor, duration=e.duration * factor) for e in seq],
        seq.id,
    )


def load_notes(path):
    """Load a note CSV or MIDI file; the id is the file stem."""
    path = Path(path)
    if path.suffix.lower() in (".mid", ".midi"):
        return parse_midi(path.read_bytes(), path.stem)
    return parse_note_csv(path.read_text(encoding="utf-8"), path.stem)


def save_notes(seq, path):
    path = Path(path)
    if path.suffix.lower() in (".mid", ".midi"):
        path.write_bytes(write_midi(seq))
    else:
        path.write_text(serialize_note_csv(seq), encoding="utf-8")
