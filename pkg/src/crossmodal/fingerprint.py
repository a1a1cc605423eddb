"""Tempo- and transposition-invariant symbolic fingerprints with an inverted index.

A fingerprint is built from three notes with increasing onsets ``t1 < t2 < t3``
and pitches ``p1, p2, p3``: ``(p2 - p1, p3 - p2, (t3 - t2) / (t2 - t1))``.
Queries are resolved by voting over ``(piece, score offset, tempo ratio)`` bins.
"""

import json
import math
import struct
from bisect import bisect_left, bisect_right
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_ids, check_int
from .exceptions import DataError, EmptyIndex, IndexFormatError, TooFewEvents

DEFAULT_D_MIN = 0.05
DEFAULT_D_MAX = 2.0
DEFAULT_FANOUT = 5
DEFAULT_BINS_PER_OCTAVE = 8
DEFAULT_TAU_TOLERANCE = 1
DEFAULT_BIN_WIDTH = 1.0
DEFAULT_TEMPO_BINS = 4
QUERY_DMAX_FACTOR = 2.0
TAU_MIN, TAU_MAX = 1.0 / 8.0, 8.0
# relative slack on window borders so that time-scaled copies of grid-aligned
# onsets select the same triples despite rounding
_WINDOW_SLACK = 1e-9
MAGIC = b"SFPI1"


@dataclass(frozen=True)
class SymbolicFingerprint:
    dp12: int
    dp23: int
    tau: float


@dataclass(frozen=True)
class LocatedFingerprint:
    fp: SymbolicFingerprint
    anchor_time: float
    dt12: float


@dataclass(frozen=True)
class ExtractionConstraints:
    d_min: float = DEFAULT_D_MIN
    d_max: float = DEFAULT_D_MAX
    fanout: int = DEFAULT_FANOUT

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max) or not math.isfinite(self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        check_int(self.fanout, "fanout", minimum=1)

    def scaled(self, alpha):
        return ExtractionConstraints(self.d_min * alpha, self.d_max * alpha, self.fanout)


@dataclass(frozen=True)
class PieceHypothesis:
    piece_id: str
    score_time: float
    tempo_ratio: float
    votes: int


def _canonical_tau(tau):
    # 12 significant digits: absorbs last-bit noise from time scaling
    return float(f"{tau:.12g}")


def extract_fingerprints(seq, constraints=ExtractionConstraints()):
    """Fingerprints of all admissible note triples of ``seq``.

    For each note, the successors considered are the first ``fanout`` notes
    (in ``(onset, pitch)`` order) whose onset lies ``d_min..d_max`` seconds
    later; the same rule picks the third note from each second note.
    """
    c = constraints
    events = seq.events
    onsets = [e.onset for e in events]
    if len(events) < 3 or len(set(onsets)) < 3:
        raise TooFewEvents(f"need >= 3 events with >= 3 distinct onsets, got {len(events)} events")
    lo_off = c.d_min * (1 - _WINDOW_SLACK)
    hi_off = c.d_max * (1 + _WINDOW_SLACK)

    def successors(i):
        t = onsets[i]
        start = bisect_left(onsets, t + lo_off, lo=i + 1)
        stop = bisect_right(onsets, t + hi_off, lo=start)
        out = []
        for j in range(start, stop):
            dt = onsets[j] - t
            if lo_off <= dt <= hi_off:
                out.append(j)
                if len(out) == c.fanout:
                    break
        return out

    succ = [successors(i) for i in range(len(events))]
    out = []
    for i, e1 in enumerate(events):
        for j in succ[i]:
            e2 = events[j]
            dt12 = e2.onset - e1.onset
            for k in succ[j]:
                e3 = events[k]
                tau = _canonical_tau((e3.onset - e2.onset) / dt12)
                fp = SymbolicFingerprint(e2.pitch - e1.pitch, e3.pitch - e2.pitch, tau)
                out.append(LocatedFingerprint(fp, e1.onset, dt12))
    return out


def tau_bucket(tau, bins_per_octave=DEFAULT_BINS_PER_OCTAVE):
    tau = min(max(tau, TAU_MIN), TAU_MAX)
    return int(math.floor(math.log2(tau) * bins_per_octave + 0.5)) + 3 * bins_per_octave


def pack_key(dp12, dp23, bucket):
    return ((dp12 + 128) << 16) | ((dp23 + 128) << 8) | bucket


def hash_fingerprint(fp, bins_per_octave=DEFAULT_BINS_PER_OCTAVE):
    """24-bit key: 8 bits per pitch interval (offset by 128), 8 bits of log-tau bucket."""
    check_int(bins_per_octave, "bins_per_octave", minimum=1)
    return pack_key(fp.dp12, fp.dp23, tau_bucket(fp.tau, bins_per_octave))


class FingerprintIndex:
    """Immutable inverted index from fingerprint key to postings.

    Each posting list is a tuple of arrays ``(piece_idx, anchor_time, dt12)``
    sorted by ``(piece_id, anchor_time)``; ``piece_ids`` is sorted, so piece
    index order equals lexicographic id order.
    """

    def __init__(self, constraints, bins_per_octave, piece_ids, postings, skipped=()):
        self.constraints = constraints
        self.bins_per_octave = bins_per_octave
        self.piece_ids = tuple(piece_ids)
        self._postings = {
            int(k): tuple(np.asarray(a).copy() for a in v) for k, v in postings.items()
        }
        for arrays in self._postings.values():
            for a in arrays:
                a.setflags(write=False)
        self.skipped = tuple(skipped)

    def __len__(self):
        return len(self._postings)

    def __contains__(self, key):
        return key in self._postings

    def keys(self):
        return sorted(self._postings)

    def postings(self, key):
        """Return ``[(piece_id, anchor_time, dt12), ...]`` for ``key``."""
        if key not in self._postings:
            return []
        idx, anchors, dts = self._postings[key]
        return [(self.piece_ids[i], float(a), float(d)) for i, a, d in zip(idx, anchors, dts)]

    def raw_postings(self, key):
        return self._postings.get(key)

    @property
    def n_postings(self):
        return sum(len(v[0]) for v in self._postings.values())

    def __eq__(self, other):
        if not isinstance(other, FingerprintIndex):
            return NotImplemented
        if (self.constraints, self.bins_per_octave, self.piece_ids) != (
                other.constraints, other.bins_per_octave, other.piece_ids):
            return False
        if self.keys() != other.keys():
            return False
        return all(
            all(np.array_equal(a, b) for a, b in zip(self._postings[k], other._postings[k]))
            for k in self._postings
        )


def build_index(corpus, constraints=ExtractionConstraints(),
                bins_per_octave=DEFAULT_BINS_PER_OCTAVE):
    """Hash every fingerprint of every piece into a :class:`FingerprintIndex`.

    Pieces with too few events are recorded in ``index.skipped`` as
    ``(piece_id, reason)`` and left out.
    """
    check_int(bins_per_octave, "bins_per_octave", minimum=1)
    corpus = list(corpus)
    ids = [seq.id for seq in corpus]
    if len(set(ids)) != len(ids):
        raise DataError("piece ids must be unique")
    skipped = []
    extracted = {}
    for seq in corpus:
        try:
            extracted[seq.id] = extract_fingerprints(seq, constraints)
        except TooFewEvents as exc:
            skipped.append((seq.id, str(exc)))
    piece_ids = sorted(extracted)
    lists = {}
    for p_idx, pid in enumerate(piece_ids):
        for lf in extracted[pid]:
            key = hash_fingerprint(lf.fp, bins_per_octave)
            lists.setdefault(key, []).append((p_idx, lf.anchor_time, lf.dt12))
    postings = {}
    for key, items in lists.items():
        items.sort()
        arr = np.array(items, dtype=float).reshape(-1, 3)
        postings[key] = (arr[:, 0].astype(np.int32), arr[:, 1].copy(), arr[:, 2].copy())
    return FingerprintIndex(constraints, bins_per_octave, piece_ids, postings, skipped)


def _collect_votes(index, query, tau_tolerance_bins):
    c = index.constraints
    query_c = ExtractionConstraints(c.d_min, c.d_max * QUERY_DMAX_FACTOR, c.fanout)
    located = extract_fingerprints(query, query_c)
    t0 = query.events[0].onset
    bpo = index.bins_per_octave
    max_bucket = 6 * bpo
    pieces, offsets, ratios = [], [], []
    for lf in located:
        base = tau_bucket(lf.fp.tau, bpo)
        for b in range(max(0, base - tau_tolerance_bins),
                       min(max_bucket, base + tau_tolerance_bins) + 1):
            hit = index.raw_postings(pack_key(lf.fp.dp12, lf.fp.dp23, b))
            if hit is None:
                continue
            p_idx, anchors, dts = hit
            r = lf.dt12 / dts
            pieces.append(p_idx)
            offsets.append(anchors - (lf.anchor_time - t0) / r)
            ratios.append(r)
    if not pieces:
        return np.empty(0, np.int64), np.empty(0), np.empty(0)
    return (np.concatenate(pieces).astype(np.int64), np.concatenate(offsets),
            np.concatenate(ratios))


def query_index(index, query, tau_tolerance_bins=DEFAULT_TAU_TOLERANCE,
                bin_width=DEFAULT_BIN_WIDTH, max_hypotheses=10,
                tempo_bins_per_octave=DEFAULT_TEMPO_BINS):
    """Identify the piece and score position of ``query`` by histogram voting.

    Every matching posting votes for ``(piece, offset bin, tempo bin)``. The
    offset is the score time aligned with the query's first onset, estimated
    with the local tempo ratio ``r = dt12_query / dt12_score``; tempo bins
    are ``1 / tempo_bins_per_octave`` octaves of ``r`` wide (``None`` turns
    the tempo axis off). A cell's score includes its direct neighbours.
    ``score_time`` is the mean offset and ``tempo_ratio`` the median ``r`` of
    the votes counted for the winner.
    """
    if len(index) == 0:
        raise EmptyIndex("fingerprint index is empty")
    check_int(tau_tolerance_bins, "tau_tolerance_bins", minimum=0)
    pieces, offsets, ratios = _collect_votes(index, query, tau_tolerance_bins)
    if pieces.size == 0:
        return []
    obins = np.floor(offsets / bin_width).astype(np.int64)
    if tempo_bins_per_octave:
        tbins = np.floor(np.log2(ratios) * tempo_bins_per_octave + 0.5).astype(np.int64)
        t_shifts = (-1, 0, 1)
    else:
        tbins = np.zeros_like(obins)
        t_shifts = (0,)
    # pad both axes by one bin so neighbour arithmetic never wraps into another piece
    o_base, t_base = obins.min() - 1, tbins.min() - 1
    o_span, t_span = obins.max() - o_base + 2, tbins.max() - t_base + 2
    cell = (pieces * o_span + (obins - o_base)) * t_span + (tbins - t_base)
    cells, counts = np.unique(cell, return_counts=True)
    neighbours = [do * t_span + dt for do in (-1, 0, 1) for dt in t_shifts]
    merged = np.zeros_like(counts)
    for shift in neighbours:
        pos = np.searchsorted(cells, cells + shift)
        pos_ok = np.minimum(pos, cells.size - 1)
        hit = cells[pos_ok] == cells + shift
        merged += np.where(hit, counts[pos_ok], 0)
    # best merged score first, then piece id, then earliest cell
    order = np.lexsort((cells, -merged))
    accepted = []
    taken = {}
    for i in order:
        cval = int(cells[i])
        p, rest = divmod(cval, o_span * t_span)
        ob = rest // t_span
        if any(abs(ob - other) <= 2 for other in taken.get(p, ())):
            continue
        taken.setdefault(p, []).append(ob)
        accepted.append((int(merged[i]), p, cval))
        if max_hypotheses and len(accepted) >= max_hypotheses:
            break
    out = []
    for votes, p, cval in accepted:
        sel = np.isin(cell, [cval + shift for shift in neighbours])
        out.append(PieceHypothesis(
            piece_id=index.piece_ids[p],
            score_time=float(np.mean(offsets[sel])),
            tempo_ratio=float(np.median(ratios[sel])),
            votes=votes,
        ))
    out.sort(key=lambda h: (-h.votes, h.piece_id))
    return out


# --------------------------------------------------------------------------
# persistence

def index_to_bytes(index):
    c = index.constraints
    out = bytearray(MAGIC)
    out += struct.pack("<ddII", c.d_min, c.d_max, c.fanout, index.bins_per_octave)
    out += struct.pack("<I", len(index.piece_ids))
    for pid in index.piece_ids:
        raw = pid.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
    out += struct.pack("<I", len(index))
    rec = np.dtype([("piece", "<u4"), ("anchor", "<f8"), ("dt12", "<f8")])
    for key in index.keys():
        p_idx, anchors, dts = index.raw_postings(key)
        out += struct.pack("<II", key, len(p_idx))
        block = np.empty(len(p_idx), dtype=rec)
        block["piece"], block["anchor"], block["dt12"] = p_idx, anchors, dts
        out += block.tobytes()
    return bytes(out)


def index_from_bytes(data):
    data = bytes(data)
    if not data.startswith(MAGIC):
        raise IndexFormatError("not a fingerprint index (bad magic)")
    rec = np.dtype([("piece", "<u4"), ("anchor", "<f8"), ("dt12", "<f8")])
    try:
        pos = len(MAGIC)
        d_min, d_max, fanout, bpo = struct.unpack_from("<ddII", data, pos)
        pos += 24
        (n_pieces,) = struct.unpack_from("<I", data, pos)
        pos += 4
        piece_ids = []
        for _ in range(n_pieces):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            piece_ids.append(data[pos:pos + n].decode("utf-8"))
            pos += n
        (n_keys,) = struct.unpack_from("<I", data, pos)
        pos += 4
        postings = {}
        for _ in range(n_keys):
            key, count = struct.unpack_from("<II", data, pos)
            pos += 8
            end = pos + count * rec.itemsize
            if end > len(data):
                raise IndexFormatError("truncated posting list")
            block = np.frombuffer(data[pos:end], dtype=rec)
            postings[key] = (block["piece"].astype(np.int32), block["anchor"].astype(float),
                             block["dt12"].astype(float))
            pos = end
    except struct.error as exc:
        raise IndexFormatError(f"truncated index: {exc}") from None
    if pos != len(data):
        raise IndexFormatError("trailing bytes after index")
    return FingerprintIndex(ExtractionConstraints(d_min, d_max, fanout), bpo, piece_ids, postings)


def save_index(index, path):
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


def load_index(path):
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read())


def index_to_json(index):
    """Human-readable dump for debugging; not read back."""
    c = index.constraints
    doc = {
        "constraints": {"d_min": c.d_min, "d_max": c.d_max, "fanout": c.fanout},
        "bins_per_octave": index.bins_per_octave,
        "piece_ids": list(index.piece_ids),
        "postings": {str(k): [list(p) for p in index.postings(k)] for k in index.keys()},
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def hypotheses_to_csv(hyps):
    rows = ["rank,piece_id,score_time,tempo_ratio,votes"]
    for rank, h in enumerate(hyps, start=1):
        rows.append(f"{rank},{h.piece_id},{h.score_time!r},{h.tempo_ratio!r},{h.votes}")
    return "\n".join(rows) + "\n"


class FingerprintIdentifier(BaseEstimator):
    """Estimator wrapper: ``fit`` builds the index, ``predict`` returns top piece ids."""

    def __init__(self, d_min=DEFAULT_D_MIN, d_max=DEFAULT_D_MAX, fanout=DEFAULT_FANOUT,
                 bins_per_octave=DEFAULT_BINS_PER_OCTAVE,
                 tau_tolerance_bins=DEFAULT_TAU_TOLERANCE, bin_width=DEFAULT_BIN_WIDTH):
        self.d_min = d_min
        self.d_max = d_max
        self.fanout = fanout
        self.bins_per_octave = bins_per_octave
        self.tau_tolerance_bins = tau_tolerance_bins
        self.bin_width = bin_width

    def fit(self, X, y=None):
        X = list(X)
        if y is not None:
            ids = check_ids(y, len(X))
            X = [seq.with_id(i) for seq, i in zip(X, ids)]
        constraints = ExtractionConstraints(self.d_min, self.d_max, self.fanout)
        self.index_ = build_index(X, constraints, self.bins_per_octave)
        return self

    def identify(self, query, max_hypotheses=10):
        check_is_fitted(self, "index_")
        return query_index(self.index_, query, self.tau_tolerance_bins, self.bin_width,
                           max_hypotheses)

    def predict(self, X):
        check_is_fitted(self, "index_")
        out = []
        for query in X:
            hyps = self.identify(query, max_hypotheses=1)
            out.append(hyps[0].piece_id if hyps else None)
        return out

    def score(self, X, y):
        pred = self.predict(X)
        return float(np.mean([p == t for p, t in zip(pred, y)]))
