"""Independent reference implementations used only by the tests."""

import itertools

import numba
import numpy as np


def pairwise_cost(query_frames, doc_frames):
    """Cosine cost, one pair at a time."""
    n, m = len(query_frames), len(doc_frames)
    cost = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            cost[i, j] = 1.0 - np.sum(query_frames[i] * doc_frames[j])
    return cost


@numba.njit(cache=True)
def _enumerate(cost, rest, best, n, m, partial):
    """Depth-first walk over every monotone path that continues from ``(n, m)``.

    ``partial`` already includes ``cost[n, m]``; ``rest[n, m]`` is a lower
    bound on what the remaining rows still have to add (each later row is
    visited at least once, at a column >= m). A branch is abandoned only
    when that bound cannot beat any endpoint still reachable, so the
    minimum per endpoint is exact.
    """
    n_rows, n_cols = cost.shape
    if n == n_rows - 1:
        if partial < best[m]:
            best[m] = partial
        # horizontal moves along the last row reach later endpoints
        if m + 1 < n_cols:
            _enumerate(cost, rest, best, n, m + 1, partial + cost[n, m + 1])
        return
    # the slack keeps float rounding in the bound from discarding an optimal path
    if partial + rest[n, m] - 1e-9 > best[m:].max():
        return
    if m + 1 < n_cols:
        _enumerate(cost, rest, best, n + 1, m + 1, partial + cost[n + 1, m + 1])
    _enumerate(cost, rest, best, n + 1, m, partial + cost[n + 1, m])
    if n > 0 and m + 1 < n_cols:
        _enumerate(cost, rest, best, n, m + 1, partial + cost[n, m + 1])


def brute_force_curve(query_frames, doc_frames):
    """Minimum path cost over all subsequence alignments ending at each doc frame, / N.

    A path starts at any ``(0, s)``, leaves the first query row immediately
    and moves by (1,1), (1,0) or (0,1) until it ends on the last query row.
    """
    cost = pairwise_cost(np.asarray(query_frames, float), np.asarray(doc_frames, float))
    n_rows, n_cols = cost.shape
    # suffix minimum of each row from column m on, summed over the rows below n
    row_min = np.minimum.accumulate(cost[:, ::-1], axis=1)[:, ::-1]
    rest = np.zeros_like(cost)
    for n in range(n_rows - 2, -1, -1):
        rest[n] = rest[n + 1] + row_min[n + 1]
    # a straight vertical path ends at every column: a finite upper bound to prune against
    # summed in path order so a vertical optimum carries the bit-identical value
    best = np.cumsum(cost, axis=0)[-1]
    for start in range(n_cols):
        _enumerate(cost, rest, best, 0, start, cost[0, start])
    return best / n_rows


def unpruned_curve(query_frames, doc_frames):
    """Same quantity as :func:`brute_force_curve` with no pruning at all (tiny inputs only)."""
    cost = pairwise_cost(np.asarray(query_frames, float), np.asarray(doc_frames, float))
    n_rows, n_cols = cost.shape
    best = np.full(n_cols, np.inf)

    def walk(n, m, partial):
        if n == n_rows - 1:
            best[m] = min(best[m], partial)
            if m + 1 < n_cols:
                walk(n, m + 1, partial + cost[n, m + 1])
            return
        if m + 1 < n_cols:
            walk(n + 1, m + 1, partial + cost[n + 1, m + 1])
        walk(n + 1, m, partial + cost[n + 1, m])
        if n > 0 and m + 1 < n_cols:
            walk(n, m + 1, partial + cost[n, m + 1])

    for s in range(n_cols):
        walk(0, s, cost[0, s])
    return best / n_rows


def count_paths(n_rows, n_cols):
    """Number of subsequence alignment paths (for sanity checks of the walker)."""
    total = 0

    def walk(n, m):
        nonlocal total
        if n == n_rows - 1:
            total += 1
            if m + 1 < n_cols:
                walk(n, m + 1)
            return
        if m + 1 < n_cols:
            walk(n + 1, m + 1)
        walk(n + 1, m)
        if n > 0 and m + 1 < n_cols:
            walk(n, m + 1)

    for s in range(n_cols):
        walk(0, s)
    return total


def triples(events, d_min, d_max, fanout):
    """Index triples ``(i, j, k)`` admitted by the successor rule, by plain scanning."""
    def successors(i):
        out = []
        for j in range(i + 1, len(events)):
            dt = events[j].onset - events[i].onset
            if d_min <= dt <= d_max:
                out.append(j)
                if len(out) == fanout:
                    break
        return out

    return [(i, j, k) for i in range(len(events)) for j in successors(i) for k in successors(j)]


def central_difference(fn, arrays, step=1e-4):
    """Central finite-difference gradient of ``fn()`` w.r.t. every entry of ``arrays`` (mutated in place, restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in itertools.product(*(range(s) for s in arr.shape)):
            keep = arr[idx]
            arr[idx] = keep + step
            up = fn()
            arr[idx] = keep - step
            down = fn()
            arr[idx] = keep
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def hinge_loss_loops(x, y, gamma):
    """Ranking loss with explicit loops."""
    total = 0.0
    for i in range(len(x)):
        for l in range(len(y)):
            if l != i:
                total += max(0.0, gamma - float(np.dot(x[i], y[i])) + float(np.dot(x[i], y[l])))
    return total
