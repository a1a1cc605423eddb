"""Joint embedding of score snippets and audio excerpts.

Two small pathways map a piano-roll snippet grid and a log-frequency excerpt
spectrogram into a shared unit sphere. They are trained with a pairwise
max-margin ranking loss, where each matching pair must beat every other
excerpt of the mini-batch by a margin ``gamma`` in cosine similarity.
"""

import json
import math
import struct
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_int, check_positive
from .exceptions import (BatchTooSmall, DatasetTooSmall, EmptyCorpus, EmptyList,
                         EmptyWindow, ModelFormatError, ShapeMismatch)

SNIPPET_SHAPE = (90, 100)
EXCERPT_SHAPE = (92, 42)
SNIPPET_LOW = 21     # pitch of snippet row 0
EXCERPT_LOW = 21     # pitch of excerpt bin 0
N_HARMONICS = 5
DEFAULT_HIDDEN = 128
DEFAULT_DIM = 32
DEFAULT_WINDOW = 2.0
ZERO_NORM = 1e-12
SHIFT_CELLS = 2.0
SCALE_RANGE = 0.10
TEMPO_RANGE = (0.8, 1.25)
HARMONIC_JITTER = 0.20
MODEL_MAGIC = b"XMEM1"
DATASET_MAGIC = b"XMDS1"


# --------------------------------------------------------------------------
# synthetic pairs

def _snippet(events, start, end):
    grid = np.zeros(SNIPPET_SHAPE)
    h, w = SNIPPET_SHAPE
    span = end - start
    for e in events:
        row = e.pitch - SNIPPET_LOW
        col = min(w - 1, int((e.onset - start) / span * w))
        if 0 <= row < h:
            grid[row, col] = 1.0
    return grid


def _excerpt(events, start, end, tempo=1.0, harmonic_gain=None):
    """Harmonic energy on the pitch grid; time is scaled by ``tempo`` about the window centre."""
    grid = np.zeros(EXCERPT_SHAPE)
    n_bins, n_frames = EXCERPT_SHAPE
    span = end - start
    frame_len = span / n_frames
    centre = start + span / 2
    gain = np.ones(N_HARMONICS) if harmonic_gain is None else harmonic_gain
    edges = start + frame_len * np.arange(n_frames + 1)
    for e in events:
        if e.onset >= end + span or e.offset <= start - span:
            continue
        on = centre + (e.onset - centre) * tempo
        off = centre + (e.offset - centre) * tempo
        overlap = np.minimum(edges[1:], off) - np.maximum(edges[:-1], on)
        overlap = np.clip(overlap, 0.0, None) / frame_len
        if not overlap.any():
            continue
        level = (e.velocity / 127.0) ** 2
        for h in range(1, N_HARMONICS + 1):
            row = int(round(e.pitch + 12 * math.log2(h))) - EXCERPT_LOW
            if 0 <= row < n_bins:
                grid[row] += level * gain[h - 1] / h ** 2 * overlap
    return grid


def _augment_snippet(grid, rng):
    # rows are pitches, so only the position axis is shifted and rescaled
    shift = rng.uniform(-SHIFT_CELLS, SHIFT_CELLS)
    scale = rng.uniform(1 - SCALE_RANGE, 1 + SCALE_RANGE)
    centre = (grid.shape[1] - 1) / 2
    # output column o samples input column centre + (o - centre - shift) / scale
    matrix = np.diag([1.0, 1.0 / scale])
    offset = [0.0, centre - (centre + shift) / scale]
    out = ndimage.affine_transform(grid, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def gen_training_pair(seq, window, augment=False, seed=0):
    """Return ``(snippet, excerpt)`` grids for the notes with onset inside ``window``.

    The snippet marks note heads at (pitch row, quantized position column);
    the excerpt renders 5 harmonics with ``1/h**2`` power onto a 92-bin
    semitone axis with 42 frames spanning the window. Augmentation shifts
    and rescales the snippet, stretches excerpt time and perturbs harmonic
    amplitudes, all drawn from ``seed``.
    """
    start, end = float(window[0]), float(window[1])
    if not end > start:
        raise EmptyWindow(f"window end {end} must exceed start {start}")
    events = [e for e in seq if start <= e.onset < end]
    if not events:
        raise EmptyWindow(f"no note onsets in [{start}, {end})")
    snippet = _snippet(events, start, end)
    if not augment:
        return snippet, _excerpt(seq, start, end)
    rng = np.random.default_rng(seed)
    snippet = _augment_snippet(snippet, rng)
    tempo = float(np.exp(rng.uniform(math.log(TEMPO_RANGE[0]), math.log(TEMPO_RANGE[1]))))
    gain = rng.uniform(1 - HARMONIC_JITTER, 1 + HARMONIC_JITTER, size=N_HARMONICS)
    return snippet, _excerpt(seq, start, end, tempo, gain)


@dataclass(frozen=True)
class PairInfo:
    pair_id: str
    piece_id: str
    start: float
    end: float


def sample_pairs(corpus, n_pairs, window=DEFAULT_WINDOW, augment=False, seed=0, prefix="pair"):
    """Draw ``n_pairs`` random windows over ``corpus``; returns ``(snippets, excerpts, infos)``."""
    check_int(n_pairs, "n_pairs", minimum=1)
    check_positive(window, "window")
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("no pieces to sample from")
    rng = np.random.default_rng(seed)
    snippets, excerpts, infos = [], [], []
    width = len(str(n_pairs - 1))
    while len(infos) < n_pairs:
        seq = corpus[int(rng.integers(len(corpus)))]
        start = float(rng.uniform(0.0, max(0.0, seq.end_time - window)))
        pair_seed = int(rng.integers(2 ** 32))
        try:
            s, x = gen_training_pair(seq, (start, start + window), augment, pair_seed)
        except EmptyWindow:
            continue
        snippets.append(s)
        excerpts.append(x)
        infos.append(PairInfo(f"{prefix}{len(infos):0{width}d}", seq.id, start, start + window))
    return np.array(snippets), np.array(excerpts), infos


# --------------------------------------------------------------------------
# pathways

@dataclass(frozen=True)
class Pathway:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def input_dim(self):
        return self.w1.shape[1]

    @property
    def shape(self):
        return (self.w1.shape[1], self.w1.shape[0], self.w2.shape[0])

    def arrays(self):
        return (self.w1, self.b1, self.w2, self.b2)


@dataclass(frozen=True)
class PathwayParams:
    snippet: Pathway
    excerpt: Pathway

    def arrays(self):
        return self.snippet.arrays() + self.excerpt.arrays()


def init_pathway(rng, input_dim, hidden=DEFAULT_HIDDEN, dim=DEFAULT_DIM):
    def layer(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    w1, b1 = layer(input_dim, hidden)
    w2, b2 = layer(hidden, dim)
    return Pathway(w1, b1, w2, b2)


def init_params(seed=0, snippet_dim=SNIPPET_SHAPE[0] * SNIPPET_SHAPE[1],
                excerpt_dim=EXCERPT_SHAPE[0] * EXCERPT_SHAPE[1],
                hidden=DEFAULT_HIDDEN, dim=DEFAULT_DIM):
    rng = np.random.default_rng(seed)
    return PathwayParams(init_pathway(rng, snippet_dim, hidden, dim),
                         init_pathway(rng, excerpt_dim, hidden, dim))


def _flatten(pathway, inputs):
    """``(batch, single)``: a flat vector or one grid is a batch of one."""
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1 or (x.ndim == 2 and x.shape[1] != pathway.input_dim
                             and x.size == pathway.input_dim)
    x = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if x.shape[1] != pathway.input_dim:
        raise ShapeMismatch(f"pathway expects {pathway.input_dim} inputs, got {x.shape[1]}")
    return x, single


def _forward_batch(pathway, x):
    hidden = np.tanh(x @ pathway.w1.T + pathway.b1)
    raw = hidden @ pathway.w2.T + pathway.b2
    norms = np.sqrt(np.sum(raw * raw, axis=1))
    live = norms >= ZERO_NORM
    emb = np.zeros_like(raw)
    emb[live] = raw[live] / norms[live, None]
    return hidden, norms, live, emb


def forward(pathway, inputs):
    """Unit-length embedding ``normalize(W2 tanh(W1 x + b1) + b2)``.

    Accepts one grid (any shape with the right number of cells) or a batch
    with the batch on axis 0. A pre-normalization norm below 1e-12 yields
    the zero vector.
    """
    x, single = _flatten(pathway, inputs)
    emb = _forward_batch(pathway, x)[3]
    return emb[0] if single else emb


# --------------------------------------------------------------------------
# loss and gradient

def _check_batches(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape != y.shape:
        raise ShapeMismatch(f"embedding batches must have equal 2-D shapes, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise BatchTooSmall("ranking loss needs at least 2 pairs per batch")
    return x, y


def _hinge_terms(x, y, gamma):
    sim = x @ y.T
    terms = gamma - np.diag(sim)[:, None] + sim
    np.fill_diagonal(terms, 0.0)
    return terms


def ranking_loss(snippet_embeddings, excerpt_embeddings, gamma=0.5, symmetric=False):
    """Sum over pairs ``i`` and contrasting excerpts ``l != i`` of
    ``max(0, gamma - s(x_i, y_i) + s(x_i, y_l))`` with ``s`` the dot product.

    ``symmetric`` adds the same sum with the roles of snippets and excerpts
    exchanged.
    """
    x, y = _check_batches(snippet_embeddings, excerpt_embeddings)
    loss = float(np.sum(np.maximum(0.0, _hinge_terms(x, y, gamma))))
    if symmetric:
        loss += float(np.sum(np.maximum(0.0, _hinge_terms(y, x, gamma))))
    return loss


def _embedding_grads(x, y, gamma, symmetric):
    """Gradient of the loss with respect to the embeddings themselves."""
    active = (_hinge_terms(x, y, gamma) > 0).astype(float)
    np.fill_diagonal(active, 0.0)
    # term(i, l) = gamma - x_i.y_i + x_i.y_l
    gx = active @ y - active.sum(axis=1)[:, None] * y
    gy = active.T @ x - active.sum(axis=1)[:, None] * x
    if symmetric:
        rev = (_hinge_terms(y, x, gamma) > 0).astype(float)
        np.fill_diagonal(rev, 0.0)
        gy += rev @ x - rev.sum(axis=1)[:, None] * x
        gx += rev.T @ y - rev.sum(axis=1)[:, None] * y
    return gx, gy


def _backward(pathway, x, hidden, norms, live, emb, g_emb):
    g_raw = np.zeros_like(g_emb)
    e, g = emb[live], g_emb[live]
    g_raw[live] = (g - e * np.sum(e * g, axis=1)[:, None]) / norms[live, None]
    g_w2 = g_raw.T @ hidden
    g_b2 = g_raw.sum(axis=0)
    g_hidden = (g_raw @ pathway.w2) * (1.0 - hidden * hidden)
    g_w1 = g_hidden.T @ x
    g_b1 = g_hidden.sum(axis=0)
    return Pathway(g_w1, g_b1, g_w2, g_b2)


def loss_and_gradient(params, snippet_batch, excerpt_batch, gamma=0.5, symmetric=False):
    xs, _ = _flatten(params.snippet, snippet_batch)
    xe, _ = _flatten(params.excerpt, excerpt_batch)
    if xs.shape[0] != xe.shape[0]:
        raise ShapeMismatch(f"{xs.shape[0]} snippets but {xe.shape[0]} excerpts")
    fs = _forward_batch(params.snippet, xs)
    fe = _forward_batch(params.excerpt, xe)
    loss = ranking_loss(fs[3], fe[3], gamma, symmetric)
    g_x, g_y = _embedding_grads(fs[3], fe[3], gamma, symmetric)
    grads = PathwayParams(_backward(params.snippet, xs, *fs, g_x),
                          _backward(params.excerpt, xe, *fe, g_y))
    return loss, grads


def loss_gradient(params, snippet_batch, excerpt_batch, gamma=0.5, symmetric=False):
    """Analytic gradient of the ranking loss of the embedded batches.

    Hinge terms that are exactly zero contribute nothing (zero subgradient).
    """
    return loss_and_gradient(params, snippet_batch, excerpt_batch, gamma, symmetric)[1]


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class EmbedConfig:
    gamma: float = 0.5
    batch_size: int = 32
    learning_rate: float = 0.01
    epochs: int = 50
    seed: int = 0
    hidden: int = DEFAULT_HIDDEN
    dim: int = DEFAULT_DIM
    symmetric: bool = False

    def __post_init__(self):
        check_positive(self.gamma, "gamma")
        check_int(self.batch_size, "batch_size", minimum=2)
        check_positive(self.learning_rate, "learning_rate")
        check_int(self.epochs, "epochs", minimum=0)
        check_int(self.hidden, "hidden", minimum=1)
        check_int(self.dim, "dim", minimum=1)


def train(snippets, excerpts, config=EmbedConfig()):
    """Mini-batch SGD on the ranking loss; returns ``(params, loss_trace)``.

    ``loss_trace[e]`` is the mean batch loss seen during epoch ``e + 1``.
    A trailing batch with a single pair is dropped.
    """
    xs = np.asarray(snippets, dtype=float)
    xe = np.asarray(excerpts, dtype=float)
    n = len(xs)
    if len(xe) != n:
        raise ShapeMismatch(f"{n} snippets but {len(xe)} excerpts")
    if n < config.batch_size:
        raise DatasetTooSmall(f"dataset has {n} pairs, batch size is {config.batch_size}")
    xs = xs.reshape(n, -1)
    xe = xe.reshape(n, -1)
    rng = np.random.default_rng(config.seed)
    params = PathwayParams(init_pathway(rng, xs.shape[1], config.hidden, config.dim),
                           init_pathway(rng, xe.shape[1], config.hidden, config.dim))
    trace = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if len(idx) < 2:
                continue
            loss, grads = loss_and_gradient(params, xs[idx], xe[idx],
                                            config.gamma, config.symmetric)
            losses.append(loss)
            # in place: the parameter arrays are owned by this loop
            for p, g in zip(params.arrays(), grads.arrays()):
                g *= config.learning_rate
                p -= g
        trace.append(float(np.mean(losses)))
    return params, trace


# --------------------------------------------------------------------------
# retrieval

def retrieve(corpus_embeddings, query, n=1):
    """Top-``n`` ``(snippet_id, score)`` by dot product; ties go to the smaller id."""
    check_int(n, "n", minimum=1)
    corpus_embeddings = list(corpus_embeddings)
    if not corpus_embeddings:
        raise EmptyCorpus("no embeddings to search")
    ids = [str(i) for i, _ in corpus_embeddings]
    mat = np.array([np.asarray(v, dtype=float) for _, v in corpus_embeddings])
    scores = mat @ np.asarray(query, dtype=float)
    ranked = sorted(zip(ids, scores.tolist()), key=lambda r: (-r[1], r[0]))
    return ranked[:n]


def majority_vote(labels):
    labels = list(labels)
    if not labels:
        raise EmptyList("nothing to vote on")
    counts = Counter(labels)
    return min(counts, key=lambda label: (-counts[label], label))


def recall_at(params, snippets, excerpts, ks=(1, 5)):
    """Fraction of excerpts whose own snippet ranks within the top ``k`` of all snippets."""
    es = forward(params.snippet, np.asarray(snippets).reshape(len(snippets), -1))
    ee = forward(params.excerpt, np.asarray(excerpts).reshape(len(excerpts), -1))
    sim = ee @ es.T
    own = np.diag(sim)
    # rank = snippets scoring strictly better, plus equal scores with a smaller index
    better = (sim > own[:, None]).sum(axis=1)
    ties = np.array([np.sum(sim[i, :i] == own[i]) for i in range(len(own))])
    rank = better + ties
    return {k: float(np.mean(rank < k)) for k in ks}


# --------------------------------------------------------------------------
# persistence

def params_to_bytes(params):
    out = [MODEL_MAGIC]
    for path in (params.snippet, params.excerpt):
        out.append(struct.pack("<III", *path.shape))
    for arr in params.arrays():
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def params_from_bytes(data):
    data = bytes(data)
    if data[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    pos = len(MODEL_MAGIC)
    if len(data) < pos + 24:
        raise ModelFormatError("truncated model header")
    shapes = [struct.unpack_from("<III", data, pos + 12 * i) for i in range(2)]
    pos += 24
    paths = []
    for d_in, hidden, dim in shapes:
        arrays = []
        for shape in ((hidden, d_in), (hidden,), (dim, hidden), (dim,)):
            size = int(np.prod(shape)) * 8
            if len(data) < pos + size:
                raise ModelFormatError("truncated model parameters")
            arrays.append(np.frombuffer(data, "<f8", int(np.prod(shape)), pos).reshape(shape).astype(float))
            pos += size
        paths.append(Pathway(*arrays))
    if pos != len(data):
        raise ModelFormatError(f"{len(data) - pos} trailing bytes in model file")
    params = PathwayParams(*paths)
    if not all(np.isfinite(a).all() for a in params.arrays()):
        raise ModelFormatError("model contains non-finite parameters")
    return params


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


def loss_trace_to_csv(trace):
    return "epoch,mean_loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(trace, start=1))


def dataset_to_bytes(snippets, excerpts):
    snippets = np.asarray(snippets, dtype="<f8")
    excerpts = np.asarray(excerpts, dtype="<f8")
    if snippets.ndim != 3 or excerpts.ndim != 3 or len(snippets) != len(excerpts):
        raise ShapeMismatch("expected equal-length stacks of 2-D grids")
    header = struct.pack("<IIIII", len(snippets), *snippets.shape[1:], *excerpts.shape[1:])
    return DATASET_MAGIC + header + snippets.tobytes() + excerpts.tobytes()


def dataset_from_bytes(data):
    data = bytes(data)
    if data[:len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise ModelFormatError("not a dataset file (bad magic)")
    pos = len(DATASET_MAGIC)
    if len(data) < pos + 20:
        raise ModelFormatError("truncated dataset header")
    n, sh, sw, eh, ew = struct.unpack_from("<IIIII", data, pos)
    pos += 20
    expected = pos + 8 * n * (sh * sw + eh * ew)
    if len(data) != expected:
        raise ModelFormatError(f"dataset body is {len(data) - pos} bytes, expected {expected - pos}")
    snippets = np.frombuffer(data, "<f8", n * sh * sw, pos).reshape(n, sh, sw).astype(float)
    excerpts = np.frombuffer(data, "<f8", n * eh * ew, pos + 8 * n * sh * sw).reshape(n, eh, ew).astype(float)
    return snippets, excerpts


def save_dataset(path, snippets, excerpts, infos):
    """Write the grid container to ``path`` and pair metadata to ``path + '.json'``."""
    if len(infos) != len(snippets):
        raise ShapeMismatch(f"{len(infos)} metadata records for {len(snippets)} pairs")
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(snippets, excerpts))
    meta = [{"id": i.pair_id, "piece": i.piece_id, "start": i.start, "end": i.end} for i in infos]
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump({"pairs": meta}, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    with open(path, "rb") as fh:
        snippets, excerpts = dataset_from_bytes(fh.read())
    try:
        with open(str(path) + ".json", encoding="utf-8") as fh:
            meta = json.load(fh)["pairs"]
        infos = [PairInfo(m["id"], m["piece"], float(m["start"]), float(m["end"])) for m in meta]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad dataset sidecar: {exc}") from exc
    if len(infos) != len(snippets):
        raise ModelFormatError(f"sidecar lists {len(infos)} pairs, container has {len(snippets)}")
    return snippets, excerpts, infos


# --------------------------------------------------------------------------
# estimator

class CrossModalEmbedding(BaseEstimator):
    """Estimator wrapper: ``fit(snippets, excerpts)`` trains both pathways.

    ``transform`` embeds snippets, ``transform_excerpts`` embeds excerpts, and
    ``predict`` returns, for each excerpt, the index of the best fitted snippet.
    """

    def __init__(self, gamma=0.5, batch_size=32, learning_rate=0.01, epochs=50,
                 hidden=DEFAULT_HIDDEN, dim=DEFAULT_DIM, symmetric=False, seed=0):
        self.gamma = gamma
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.hidden = hidden
        self.dim = dim
        self.symmetric = symmetric
        self.seed = seed

    def _config(self):
        return EmbedConfig(self.gamma, self.batch_size, self.learning_rate, self.epochs,
                           self.seed, self.hidden, self.dim, self.symmetric)

    def fit(self, X, y):
        self.params_, self.loss_trace_ = train(X, y, self._config())
        self.snippet_embeddings_ = self.transform(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=float)
        return forward(self.params_.snippet, X.reshape(len(X), -1))

    def transform_excerpts(self, X):
        check_is_fitted(self, "params_")
        X = np.asarray(X, dtype=float)
        return forward(self.params_.excerpt, X.reshape(len(X), -1))

    def predict(self, X):
        sims = self.transform_excerpts(X) @ self.snippet_embeddings_.T
        return np.argmax(sims, axis=1)
