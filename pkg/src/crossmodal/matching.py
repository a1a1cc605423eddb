"""Subsequence DTW of a query chromagram against document chromagrams."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_ids, check_int
from .chroma import cyclic_shift
from .exceptions import DataError, EmptyInput, QueryTooShort

DEFAULT_THRESHOLD = 0.25


@dataclass(frozen=True)
class MatchingCurve:
    values: np.ndarray
    query_length: int

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class RankedMatch:
    doc_id: str
    start_frame: int
    end_frame: int
    cost: float
    transposition: int = 0

    @property
    def segment(self):
        return (self.start_frame, self.end_frame)


class RankedList(list):
    """List of :class:`RankedMatch`; ``skipped`` holds ``(doc_id, reason)`` records."""

    def __init__(self, matches=(), skipped=()):
        super().__init__(matches)
        self.skipped = list(skipped)


def cost_matrix(query_frames, doc_frames):
    """Cosine cost ``1 - <x, y>`` between every query and document frame."""
    return 1.0 - np.sum(query_frames[:, None, :] * doc_frames[None, :, :], axis=2)


@numba.njit(cache=True, nogil=True)
def _accumulate(cost):
    n_rows, n_cols = cost.shape
    acc = np.empty((n_rows, n_cols))
    for m in range(n_cols):
        acc[0, m] = cost[0, m]
    for n in range(1, n_rows):
        acc[n, 0] = acc[n - 1, 0] + cost[n, 0]
        for m in range(1, n_cols):
            best = acc[n - 1, m - 1]
            if acc[n - 1, m] < best:
                best = acc[n - 1, m]
            if acc[n, m - 1] < best:
                best = acc[n, m - 1]
            acc[n, m] = best + cost[n, m]
    return acc


@numba.njit(cache=True, nogil=True)
def _backtrack(acc, end):
    """Start column of the optimal path ending at ``(last row, end)``.

    Predecessor preference on ties: diagonal, then vertical, then horizontal.
    """
    n = acc.shape[0] - 1
    m = end
    while n > 0:
        if m == 0:
            n -= 1
            continue
        diag = acc[n - 1, m - 1]
        vert = acc[n - 1, m]
        horiz = acc[n, m - 1]
        if diag <= vert and diag <= horiz:
            n -= 1
            m -= 1
        elif vert <= horiz:
            n -= 1
        else:
            m -= 1
    return m


def _check_pair(query, doc):
    if len(query) == 0 or len(doc) == 0:
        raise EmptyInput("query and document must both be non-empty")
    if len(query) < 2:
        raise QueryTooShort("query needs at least 2 frames")
    if not math.isclose(query.frame_rate, doc.frame_rate, rel_tol=1e-9):
        raise DataError(f"frame rates differ: {query.frame_rate} vs {doc.frame_rate}")


def accumulated_cost(query, doc):
    _check_pair(query, doc)
    return _accumulate(np.ascontiguousarray(cost_matrix(query.frames, doc.frames)))


def matching_function(query, doc):
    """Normalized cost of the best alignment of the whole query ending at each doc frame.

    Steps (1,1), (1,0), (0,1) with unit weights; an alignment may start at
    any document frame. Values are divided by the query length.
    """
    acc = accumulated_cost(query, doc)
    return MatchingCurve(acc[-1] / len(query), len(query))


def local_minima(curve, threshold=DEFAULT_THRESHOLD, exclusion=1):
    """Greedy minimum picking: take the lowest value below ``threshold``,
    blank ``exclusion`` frames on each side, repeat.

    Returns ``[(frame, cost), ...]`` ordered by ascending cost.
    """
    exclusion = check_int(exclusion, "exclusion", minimum=1)
    values = np.array(getattr(curve, "values", curve), dtype=float)
    out = []
    while values.size:
        idx = int(np.argmin(values))
        cost = values[idx]
        if not cost < threshold:
            break
        out.append((idx, float(cost)))
        values[max(0, idx - exclusion):idx + exclusion + 1] = np.inf
    return out


def _match_document(query, doc_id, doc, threshold, exclusion, shifts):
    curves = []
    accs = []
    for t in shifts:
        q = cyclic_shift(query, -t) if t else query
        acc = accumulated_cost(q, doc)
        accs.append(acc)
        curves.append(acc[-1] / len(query))
    curves = np.vstack(curves)
    best_shift = np.argmin(curves, axis=0)
    best = curves[best_shift, np.arange(curves.shape[1])]
    matches = []
    for frame, cost in local_minima(best, threshold, exclusion):
        k = int(best_shift[frame])
        start = int(_backtrack(accs[k], frame))
        matches.append(RankedMatch(doc_id, start, frame, cost, int(shifts[k])))
    return matches


def rank_documents(query, corpus, threshold=DEFAULT_THRESHOLD, exclusion=None,
                   search_transpositions=False, n_jobs=None):
    """Rank matching segments of every document in ``corpus`` for ``query``.

    ``corpus`` is a sequence of ``(doc_id, Chromagram)`` pairs. With
    ``search_transpositions`` the query is tried under all 12 cyclic shifts;
    the reported ``transposition`` is the number of semitones the query lies
    above the matched segment. Documents that fail are listed in
    ``result.skipped`` instead of aborting the query.
    """
    corpus = list(corpus)
    if not corpus:
        raise EmptyInput("corpus is empty")
    if exclusion is None:
        exclusion = max(1, len(query) // 2)
    shifts = tuple(range(12)) if search_transpositions else (0,)

    def run(item):
        doc_id, doc = item
        try:
            return _match_document(query, doc_id, doc, threshold, exclusion, shifts), None
        except DataError as exc:
            return [], (doc_id, str(exc))

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, corpus))
    else:
        results = [run(item) for item in corpus]

    matches = [m for found, _ in results for m in found]
    skipped = [err for _, err in results if err is not None]
    matches.sort(key=lambda m: (m.cost, m.doc_id, m.end_frame, m.transposition))
    return RankedList(matches, skipped)


def ranked_to_csv(matches, top=None):
    rows = ["rank,doc_id,start_frame,end_frame,cost,transposition"]
    for rank, m in enumerate(matches[:top] if top else matches, start=1):
        rows.append(f"{rank},{m.doc_id},{m.start_frame},{m.end_frame},{m.cost!r},{m.transposition}")
    return "\n".join(rows) + "\n"


class SubsequenceMatcher(BaseEstimator):
    """Estimator-style wrapper around :func:`rank_documents`.

    ``fit`` stores the document chromagrams; ``predict`` returns, for each
    query, the id of the best-matching document (``None`` when nothing falls
    below the threshold); ``rank`` gives the full ranked list.
    """

    def __init__(self, threshold=DEFAULT_THRESHOLD, exclusion=None,
                 search_transpositions=False, n_jobs=None):
        self.threshold = threshold
        self.exclusion = exclusion
        self.search_transpositions = search_transpositions
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = list(X)
        if not X:
            raise EmptyInput("cannot fit on an empty corpus")
        self.doc_ids_ = check_ids(y, len(X))
        self.corpus_ = list(zip(self.doc_ids_, X))
        return self

    def rank(self, query):
        check_is_fitted(self, "corpus_")
        return rank_documents(query, self.corpus_, self.threshold, self.exclusion,
                              self.search_transpositions, self.n_jobs)

    def predict(self, X):
        check_is_fitted(self, "corpus_")
        out = []
        for query in X:
            ranked = self.rank(query)
            out.append(ranked[0].doc_id if ranked else None)
        return out
