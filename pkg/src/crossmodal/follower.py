"""Real-time piece identification and score following.

Two cooperating parts: a global identifier that periodically queries the
fingerprint index with the most recent notes, and a local online DTW tracker
that follows the identified piece frame by frame. The companion arbitrates
between them and re-seeds the tracker when the identifier consistently
disagrees or the tracker loses confidence.
"""

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chroma import N_CHROMA, NEUTRAL, DEFAULT_EPS, frame_norms, symbolic_chromagram
from .exceptions import DataError, NotInitialized, PositionOutOfRange, TooFewEvents
from .fingerprint import DEFAULT_TAU_TOLERANCE, query_index
from .notes_io import NoteEvent, NoteSequence

DEFAULT_WIDTH = 50
CONFIDENCE_HISTORY = 20
# cosine cost between non-negative unit vectors never exceeds 1
DEFAULT_COST_SCALE = 1.0
# added to (1,0) and (0,1) steps; breaks ties inside runs of identical frames
STEP_PENALTY = 1e-6
# max consecutive input frames a path may stay on one document frame
DEFAULT_MAX_RUN = 3

IDENTIFYING, TRACKING, LOST = "identifying", "tracking", "lost"


@dataclass(frozen=True)
class TrackerState:
    doc_id: str
    position: int
    frontier: np.ndarray = field(default_factory=lambda: np.empty(0))
    frontier_start: int = 0
    confidence: float = 1.0
    recent_costs: tuple = ()
    runs: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @classmethod
    def seeded(cls, doc_id, position):
        return cls(doc_id, int(position))


def _local_costs(frames, frame):
    return np.maximum(0.0, 1.0 - np.sum(frames * frame[None, :], axis=1))


def tracker_step(state, frame, doc, width=DEFAULT_WIDTH, cost_scale=DEFAULT_COST_SCALE,
                 step_penalty=STEP_PENALTY, max_run=DEFAULT_MAX_RUN):
    """Advance the online alignment by one input frame.

    The accumulated-cost frontier covers document frames
    ``[position - 1, position + width]`` (clipped to the document) and is
    extended with the steps (1,1), (1,0), (0,1); the two non-diagonal steps
    pay ``step_penalty`` extra so that runs of identical document frames are
    crossed diagonally, and a path may not take more than ``max_run``
    consecutive (1,0) steps. A freshly seeded state starts its path exactly
    at ``position``. The new position is the
    frontier argmin at or after the old position (ties to the smaller index).
    """
    n_doc = len(doc)
    if not 0 <= state.position < n_doc:
        raise PositionOutOfRange(f"position {state.position} outside document of {n_doc} frames")
    if width < 3:
        raise ValueError("width must be >= 3")
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (N_CHROMA,):
        raise DataError(f"expected a 12-bin chroma frame, got shape {frame.shape}")

    lo = max(0, state.position - 1)
    hi = min(n_doc - 1, state.position + width)
    cost = _local_costs(doc.frames[lo:hi + 1], frame)
    acc = np.full(hi - lo + 1, np.inf)
    runs = np.zeros(hi - lo + 1, dtype=int)

    if state.frontier.size == 0:
        start = state.position - lo
        acc[start] = cost[start]
        for i in range(start + 1, acc.size):
            acc[i] = acc[i - 1] + cost[i] + step_penalty
    else:
        # prev[i + 1] / prev_runs[i + 1] describe the old frontier at doc frame lo + i
        prev = np.full(hi - lo + 2, np.inf)
        prev_runs = np.zeros(hi - lo + 2, dtype=int)
        p_lo = state.frontier_start
        for i in range(-1, hi - lo + 1):
            j = lo + i - p_lo
            if 0 <= j < state.frontier.size:
                prev[i + 1] = state.frontier[j]
                prev_runs[i + 1] = state.runs[j]
        for i in range(acc.size):
            best, run = prev[i], 0
            if prev_runs[i + 1] < max_run and prev[i + 1] + step_penalty < best:
                best, run = prev[i + 1] + step_penalty, prev_runs[i + 1] + 1
            if i > 0 and acc[i - 1] + step_penalty < best:
                best, run = acc[i - 1] + step_penalty, 0
            acc[i] = best + cost[i]
            runs[i] = run

    finite = np.isfinite(acc)
    if finite.any():
        acc = acc - acc[finite].min()
    offset = state.position - lo
    new_pos = lo + offset + int(np.argmin(acc[offset:]))
    recent = (state.recent_costs + (float(cost[new_pos - lo]),))[-CONFIDENCE_HISTORY:]
    confidence = min(1.0, max(0.0, 1.0 - float(np.mean(recent)) / cost_scale))
    return TrackerState(state.doc_id, new_pos, acc, lo, confidence, recent, runs)


@dataclass(frozen=True)
class StreamFrame:
    """A timestamped chroma frame from an external chroma stream."""

    time: float
    values: np.ndarray


@dataclass(frozen=True)
class CompanionHypothesis:
    piece_id: str
    score_time: float
    tempo_ratio: float
    status: str
    confidence: float = 0.0
    stream_time: float = 0.0


@dataclass(frozen=True)
class CompanionConfig:
    buffer_seconds: float = 8.0
    eval_interval: float = 1.0
    margin: float = 1.5
    consecutive: int = 3
    confidence_threshold: float = 0.4
    width: int = DEFAULT_WIDTH
    frame_rate: float = 10.0
    min_votes: int = 4
    jump_tolerance: float = 5.0
    tau_tolerance_bins: int = DEFAULT_TAU_TOLERANCE
    cost_scale: float = DEFAULT_COST_SCALE


@dataclass(frozen=True)
class _Identification:
    stream_time: float
    buffer_start: float
    hypotheses: tuple


def _frame_from_notes(notes, start, stop, eps=DEFAULT_EPS):
    frame = np.zeros(N_CHROMA)
    span = stop - start
    for e in notes:
        overlap = min(stop, e.offset) - max(start, e.onset)
        if overlap > 0:
            frame[e.pitch % N_CHROMA] += overlap / span
    norm = frame_norms(frame[None, :])[0]
    return frame / norm if norm >= eps else NEUTRAL.copy()


class Companion:
    """Piece identifier plus score tracker over a fixed piece database.

    ``process`` consumes one input record (a :class:`NoteEvent`, whose onset
    is its stream time, or a :class:`StreamFrame`) and returns the current
    :class:`CompanionHypothesis`. When no chroma frames are supplied, frames
    are derived from the note events at ``config.frame_rate``.
    """

    def __init__(self, index=None, chromagrams=None, config=CompanionConfig()):
        self.index = index
        self.chromagrams = dict(chromagrams or {})
        self.config = config
        self.reset()

    @classmethod
    def from_corpus(cls, index, corpus, config=CompanionConfig()):
        grams = {seq.id: symbolic_chromagram(seq, config.frame_rate) for seq in corpus}
        return cls(index, grams, config)

    def reset(self):
        self.status = IDENTIFYING
        self.tracker = None
        self.tempo_ratio = 1.0
        self._buffer = deque()
        self._sounding = []
        self._next_frame = 0
        self._external_frames = False
        self._last_eval = None
        self._disagree = 0
        self._now = 0.0
        self.current = CompanionHypothesis("", 0.0, 1.0, IDENTIFYING)

    # -- phases -----------------------------------------------------------

    def _ingest(self, item):
        """Update buffers; return (frames to track, identification snapshot or None)."""
        if self.index is None or not self.chromagrams:
            raise NotInitialized("companion needs a fingerprint index and chromagrams")
        cfg = self.config
        frames = []
        if isinstance(item, StreamFrame):
            self._external_frames = True
            self._now = max(self._now, float(item.time))
            frames.append(np.asarray(item.values, dtype=float))
            return frames, None
        if not isinstance(item, NoteEvent):
            raise TypeError(f"unsupported stream item {item!r}")
        t = item.onset
        self._now = max(self._now, t)
        if not self._external_frames:
            while (self._next_frame + 1) / cfg.frame_rate <= t:
                start = self._next_frame / cfg.frame_rate
                stop = (self._next_frame + 1) / cfg.frame_rate
                frames.append(_frame_from_notes(self._sounding, start, stop))
                self._next_frame += 1
            horizon = self._next_frame / cfg.frame_rate
            self._sounding = [e for e in self._sounding if e.offset > horizon]
            self._sounding.append(item)
        self._buffer.append(item)
        while self._buffer and self._buffer[0].onset < t - cfg.buffer_seconds:
            self._buffer.popleft()
        snapshot = None
        # evaluations fall on a fixed grid of eval_interval, taken at the first note past each tick
        tick = int(np.floor(t / cfg.eval_interval))
        if self._last_eval is None or tick > self._last_eval or self.tracker is None:
            self._last_eval = tick
            snapshot = (t, tuple(self._buffer))
        return frames, snapshot

    def _identify(self, snapshot):
        t, notes = snapshot
        seq = NoteSequence(notes)
        try:
            hyps = query_index(self.index, seq, self.config.tau_tolerance_bins)
        except TooFewEvents:
            hyps = []
        return _Identification(t, seq.events[0].onset if seq.events else t, tuple(hyps))

    def _track(self, frames):
        if self.tracker is None:
            return
        doc = self.chromagrams[self.tracker.doc_id]
        for frame in frames:
            self.tracker = tracker_step(self.tracker, frame, doc, self.config.width,
                                        self.config.cost_scale)

    def _strong(self, ident):
        if not ident.hypotheses:
            return None
        top = ident.hypotheses[0]
        if top.piece_id not in self.chromagrams:
            return None
        runner = next((h.votes for h in ident.hypotheses if h.piece_id != top.piece_id), 0)
        if top.votes >= self.config.min_votes and top.votes >= self.config.margin * runner:
            return top
        return None

    def _estimated_position(self, ident, hyp):
        return hyp.score_time + (ident.stream_time - ident.buffer_start) / hyp.tempo_ratio

    def _seed(self, hyp, position_s):
        doc = self.chromagrams[hyp.piece_id]
        frame = int(round(position_s * self.config.frame_rate))
        frame = min(max(frame, 0), len(doc) - 1)
        self.tracker = TrackerState.seeded(hyp.piece_id, frame)
        self.tempo_ratio = hyp.tempo_ratio
        self.status = TRACKING
        self._disagree = 0

    def _arbitrate(self, ident):
        cfg = self.config
        top = self._strong(ident)
        if self.tracker is None:
            if top is not None:
                self._seed(top, self._estimated_position(ident, top))
            return
        if top is not None:
            est = self._estimated_position(ident, top)
            here = self.tracker.position / cfg.frame_rate
            differs = (top.piece_id != self.tracker.doc_id
                       or abs(est - here) > cfg.jump_tolerance)
            self._disagree = self._disagree + 1 if differs else 0
            if not differs:
                self.tempo_ratio = top.tempo_ratio
        else:
            self._disagree = 0
        # a lost tracker is not trusted again until it is re-seeded
        if top is not None and (self._disagree >= cfg.consecutive
                                or self.status == LOST
                                or self.tracker.confidence < cfg.confidence_threshold):
            self._seed(top, self._estimated_position(ident, top))
        elif self.status == LOST or self.tracker.confidence < cfg.confidence_threshold:
            self.status = LOST
        else:
            self.status = TRACKING

    def _publish(self):
        if self.tracker is None:
            hyp = CompanionHypothesis("", 0.0, self.tempo_ratio, self.status, 0.0, self._now)
        else:
            hyp = CompanionHypothesis(
                self.tracker.doc_id,
                self.tracker.position / self.config.frame_rate,
                self.tempo_ratio,
                self.status,
                self.tracker.confidence,
                self._now,
            )
        self.current = hyp  # single atomic replacement of the shared cell
        return hyp

    # -- drivers ----------------------------------------------------------

    def process(self, item):
        frames, snapshot = self._ingest(item)
        ident = self._identify(snapshot) if snapshot is not None else None
        self._track(frames)
        if ident is not None:
            self._arbitrate(ident)
        return self._publish()


def companion_process(companion, item):
    return companion.process(item)


def run_sequential(companion, stream):
    return [companion.process(item) for item in stream]


def run_concurrent(companion, stream):
    """Drive the companion with identification on a worker thread.

    Identification of a snapshot overlaps with tracking of the frames that
    arrived with the same record; results are joined before arbitration so
    the trace equals :func:`run_sequential`.
    """
    trace = []
    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="identifier") as pool:
        for item in stream:
            frames, snapshot = companion._ingest(item)
            pending = pool.submit(companion._identify, snapshot) if snapshot is not None else None
            companion._track(frames)
            if pending is not None:
                companion._arbitrate(pending.result())
            trace.append(companion._publish())
    return trace


# --------------------------------------------------------------------------
# stream / trace text formats

def parse_stream(text, frame_rate=10.0):
    """Parse ``E,onset,duration,pitch,velocity`` and ``F,v0,...,v11`` records.

    Frame records carry no timestamp; the k-th frame is placed at
    ``k / frame_rate``.
    """
    items = []
    n_frames = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if parts[0] == "E" and len(parts) == 5:
                items.append(NoteEvent(float(parts[1]), int(parts[3]), float(parts[2]),
                                       int(parts[4])))
            elif parts[0] == "F" and len(parts) == 13:
                values = np.array([float(v) for v in parts[1:]])
                if np.any(values < 0) or not np.all(np.isfinite(values)):
                    raise ValueError("chroma values must be finite and >= 0")
                norm = frame_norms(values[None, :])[0]
                values = values / norm if norm >= DEFAULT_EPS else NEUTRAL.copy()
                items.append(StreamFrame(n_frames / frame_rate, values))
                n_frames += 1
            else:
                raise ValueError("unknown record type or wrong field count")
        except ValueError as exc:
            raise DataError(f"stream line {lineno}: {exc}") from None
    return items


def stream_from_notes(seq):
    return list(seq.events)


def trace_to_csv(trace):
    rows = ["stream_time,status,piece_id,score_time,tempo_ratio,confidence"]
    for h in trace:
        rows.append(f"{h.stream_time!r},{h.status},{h.piece_id},{h.score_time!r},"
                    f"{h.tempo_ratio!r},{h.confidence!r}")
    return "\n".join(rows) + "\n"
