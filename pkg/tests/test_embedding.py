import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from crossmodal.datagen import generate_corpus
from crossmodal.embedding import (EXCERPT_SHAPE, SNIPPET_SHAPE, CrossModalEmbedding,
                                  EmbedConfig, Pathway, dataset_from_bytes,
                                  dataset_to_bytes, forward, gen_training_pair, init_params,
                                  load_dataset, load_params, loss_and_gradient, loss_gradient,
                                  loss_trace_to_csv, majority_vote, params_from_bytes,
                                  params_to_bytes, ranking_loss, recall_at, retrieve,
                                  sample_pairs, save_dataset, save_params, train)
from crossmodal.exceptions import (BatchTooSmall, DatasetTooSmall, EmptyCorpus, EmptyList,
                                   EmptyWindow, ModelFormatError, ShapeMismatch)
from crossmodal.notes_io import NoteEvent, NoteSequence
from oracles import central_difference, hinge_loss_loops


def unit_rows(rng, b, k):
    v = rng.normal(size=(b, k))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def small_data():
    corpus = generate_corpus(4, 120, seed=2)
    return sample_pairs(corpus, 200, seed=4)


class TestPairs:
    def test_single_note(self):
        seq = NoteSequence([NoteEvent(0.9, 60, 0.2)])
        snippet, excerpt = gen_training_pair(seq, (0.0, 2.0))
        assert snippet.shape == SNIPPET_SHAPE and excerpt.shape == EXCERPT_SHAPE
        assert np.count_nonzero(snippet) == 1 and snippet[60 - 21, 45] == 1.0
        active = np.flatnonzero(excerpt.sum(axis=0))
        frame = 2.0 / 42
        assert active.min() == int(0.9 // frame) and active.max() == int(1.1 // frame)
        assert excerpt[60 - 21].max() > 0 and excerpt[60 - 21 + 12].max() > 0

    def test_harmonic_power_law(self):
        seq = NoteSequence([NoteEvent(0.0, 40, 2.0, velocity=127)])
        _, excerpt = gen_training_pair(seq, (0.0, 2.0))
        col = excerpt[:, 10]
        rows = [40 - 21 + int(round(12 * np.log2(h))) for h in (1, 2, 3, 4, 5)]
        assert col[rows] == pytest.approx([1 / h ** 2 for h in (1, 2, 3, 4, 5)])

    def test_augment_deterministic(self):
        seq = generate_corpus(1, 100, seed=1)[0]
        a = gen_training_pair(seq, (3.0, 5.0), augment=True, seed=9)
        b = gen_training_pair(seq, (3.0, 5.0), augment=True, seed=9)
        c = gen_training_pair(seq, (3.0, 5.0), augment=True, seed=10)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
        assert not np.array_equal(a[1], c[1])
        assert a[0].min() >= 0 and a[0].max() <= 1

    def test_empty_window(self):
        with pytest.raises(EmptyWindow):
            gen_training_pair(NoteSequence([NoteEvent(5.0, 60, 1.0)]), (0.0, 2.0))

    def test_sample_pairs(self, small_data):
        snippets, excerpts, infos = small_data
        assert snippets.shape == (200,) + SNIPPET_SHAPE
        assert excerpts.shape == (200,) + EXCERPT_SHAPE
        assert infos[0].pair_id == "pair000" and infos[-1].pair_id == "pair199"
        assert np.all(np.isfinite(excerpts)) and excerpts.min() >= 0


class TestForward:
    def test_zero_weights(self):
        p = Pathway(np.zeros((4, 6)), np.zeros(4), np.zeros((3, 4)), np.zeros(3))
        assert np.array_equal(forward(p, np.ones(6)), np.zeros(3))

    def test_shape_mismatch(self):
        p = init_params(0, 6, 5, 4, 3).snippet
        with pytest.raises(ShapeMismatch):
            forward(p, np.ones(7))

    def test_batch_and_single_agree(self, rng):
        p = init_params(0, 6, 5, 4, 3).snippet
        x = rng.random((5, 6))
        assert np.allclose(forward(p, x)[2], forward(p, x[2]), atol=1e-15)
        assert np.allclose(forward(p, x.reshape(5, 2, 3)), forward(p, x), atol=0)

    @given(arrays(float, 6, elements=st.floats(-10, 10)), st.integers(0, 50))
    def test_unit_or_zero(self, x, seed):
        emb = forward(init_params(seed, 6, 5, 8, 4).snippet, x)
        norm = np.linalg.norm(emb)
        assert norm == 0.0 or abs(norm - 1) <= 1e-9


class TestLoss:
    def test_hand_example_zero(self):
        # x1.y1 = 0.9, x1.y2 = 0.2, x2.y2 = 0.9, x2.y1 = 0.2
        x = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        y = np.array([[0.9, 0.2, 0.0], [0.2, 0.9, 0.0]])
        assert ranking_loss(x, y, 0.5) == 0.0

    def test_hand_example_positive(self):
        x = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        y = np.array([[0.9, 0.2, 0.0], [0.8, 0.9, 0.0]])
        # term 1 = 0.5 - 0.9 + 0.8, term 2 = max(0, 0.5 - 0.9 + 0.2)
        assert ranking_loss(x, y, 0.5) == pytest.approx(0.4, abs=1e-15)

    def test_orthonormal_zero_margin(self):
        x = np.eye(4)
        assert ranking_loss(x, x.copy(), 0.0) == 0.0

    def test_batch_too_small(self):
        with pytest.raises(BatchTooSmall):
            ranking_loss(np.eye(3)[:1], np.eye(3)[:1])

    @given(st.integers(2, 8), st.integers(2, 6), st.floats(0.0, 1.0), st.integers(0, 1000))
    def test_matches_loops_and_zero_iff_margins(self, b, k, gamma, seed):
        rng = np.random.default_rng(seed)
        x, y = unit_rows(rng, b, k), unit_rows(rng, b, k)
        loss = ranking_loss(x, y, gamma)
        assert loss >= 0
        assert loss == pytest.approx(hinge_loss_loops(x, y, gamma), abs=1e-12)
        s = x @ y.T
        margins = all(s[i, i] - s[i, l] >= gamma for i in range(b) for l in range(b) if l != i)
        assert (loss == 0) == margins

    def test_symmetric_adds_reverse(self, rng):
        x, y = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
        assert ranking_loss(x, y, 0.5, symmetric=True) == pytest.approx(
            ranking_loss(x, y, 0.5) + ranking_loss(y, x, 0.5), abs=1e-12)


def relative_error(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else np.linalg.norm(a - b) / scale


class TestGradient:
    @pytest.mark.parametrize("symmetric", [False, True])
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed, symmetric):
        rng = np.random.default_rng(seed)
        params = init_params(seed, snippet_dim=12, excerpt_dim=10, hidden=16, dim=8)
        sb, eb = rng.random((4, 12)), rng.random((4, 10))
        grads = loss_gradient(params, sb, eb, 0.5, symmetric)
        numeric = central_difference(
            lambda: loss_and_gradient(params, sb, eb, 0.5, symmetric)[0], params.arrays())
        for g, n in zip(grads.arrays(), numeric):
            assert g.shape == n.shape and np.all(np.isfinite(g))
            assert relative_error(g, n) < 1e-5

    def test_zero_loss_zero_gradient(self):
        # one-hot inputs with identity-like weights put every pair far inside the margin
        params = init_params(0, snippet_dim=4, excerpt_dim=4, hidden=4, dim=4)
        for path in (params.snippet, params.excerpt):
            path.w1[...] = 3 * np.eye(4)
            path.b1[...] = 0
            path.w2[...] = np.eye(4)
            path.b2[...] = 0
        loss, grads = loss_and_gradient(params, np.eye(4), np.eye(4), 0.5)
        assert loss == 0.0
        assert all(not g.any() for g in grads.arrays())

    def test_shape_mismatch(self):
        params = init_params(0, 12, 10, 16, 8)
        with pytest.raises(ShapeMismatch):
            loss_gradient(params, np.ones((4, 12)), np.ones((3, 10)))
        with pytest.raises(ShapeMismatch):
            loss_gradient(params, np.ones((4, 11)), np.ones((4, 10)))


class TestTraining:
    def test_loss_drops(self, small_data):
        snippets, excerpts, _ = small_data
        _, trace = train(snippets, excerpts, EmbedConfig(epochs=10))
        assert trace[9] < 0.5 * trace[0]

    def test_deterministic(self, small_data):
        snippets, excerpts, _ = small_data
        cfg = EmbedConfig(epochs=2, hidden=16, dim=8, seed=3)
        p1, t1 = train(snippets, excerpts, cfg)
        p2, t2 = train(snippets, excerpts, cfg)
        assert t1 == t2
        assert params_to_bytes(p1) == params_to_bytes(p2)
        assert loss_trace_to_csv(t1) == loss_trace_to_csv(t2)
        assert loss_trace_to_csv(t1).splitlines()[0] == "epoch,mean_loss"

    def test_too_small(self):
        with pytest.raises(DatasetTooSmall):
            train(np.zeros((1,) + SNIPPET_SHAPE), np.zeros((1,) + EXCERPT_SHAPE))

    @pytest.mark.parametrize("bad", [dict(gamma=0), dict(batch_size=1), dict(learning_rate=-1)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            EmbedConfig(**bad)

    def test_estimator_and_recall(self, small_data):
        snippets, excerpts, _ = small_data
        est = CrossModalEmbedding(epochs=5, hidden=32, dim=16).fit(snippets, excerpts)
        pred = est.predict(excerpts)
        assert pred.shape == (200,)
        recall = recall_at(est.params_, snippets, excerpts)
        assert recall[1] == pytest.approx(np.mean(pred == np.arange(200)))
        assert recall[1] > 1 / 200


class TestRetrieval:
    def test_identical_vector(self, rng):
        vecs = unit_rows(rng, 5, 4)
        top = retrieve([(f"s{i}", v) for i, v in enumerate(vecs)], vecs[3], 1)
        assert top[0][0] == "s3" and abs(top[0][1] - 1.0) <= 1e-9

    def test_orthogonal(self):
        corpus = [("a", np.eye(4)[0]), ("b", np.eye(4)[1])]
        assert all(abs(s) <= 1e-9 for _, s in retrieve(corpus, np.eye(4)[2], 2))

    def test_clamp_and_ties(self):
        corpus = [("b", np.eye(2)[0]), ("a", np.eye(2)[0]), ("c", np.eye(2)[1])]
        assert [i for i, _ in retrieve(corpus, np.eye(2)[0], 10)] == ["a", "b", "c"]

    def test_empty(self):
        with pytest.raises(EmptyCorpus):
            retrieve([], np.ones(3))

    def test_majority(self):
        assert majority_vote(["A", "A", "B"]) == "A"
        assert majority_vote(["B", "A"]) == "A"
        with pytest.raises(EmptyList):
            majority_vote([])


class TestPersistence:
    def test_model_round_trip(self, tmp_path):
        params = init_params(5, 12, 10, 16, 8)
        data = params_to_bytes(params)
        assert data[:5] == b"XMEM1"
        back = params_from_bytes(data)
        assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), back.arrays()))
        save_params(params, tmp_path / "m.bin")
        assert params_to_bytes(load_params(tmp_path / "m.bin")) == data

    @pytest.mark.parametrize("mutate", [lambda d: b"XXXXX" + d[5:], lambda d: d[:-8],
                                        lambda d: d + b"\0"])
    def test_model_corrupt(self, mutate):
        with pytest.raises(ModelFormatError):
            params_from_bytes(mutate(params_to_bytes(init_params(0, 3, 3, 2, 2))))

    def test_dataset_round_trip(self, small_data, tmp_path):
        snippets, excerpts, infos = small_data
        s2, e2 = dataset_from_bytes(dataset_to_bytes(snippets[:10], excerpts[:10]))
        assert np.array_equal(s2, snippets[:10]) and np.array_equal(e2, excerpts[:10])
        save_dataset(tmp_path / "d.bin", snippets[:10], excerpts[:10], infos[:10])
        s3, e3, i3 = load_dataset(tmp_path / "d.bin")
        assert np.array_equal(s3, snippets[:10]) and i3 == infos[:10]
        assert (tmp_path / "d.bin.json").read_text().startswith("{")
