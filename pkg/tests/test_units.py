import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import levenshtein
from unitrans.exceptions import ClusteringError, MetricError, ShapeError, VocabError
from unitrans.units import (
    Codebook, UnitSequence, Unitizer, collapse_units, edit_distance, encode_features, kmeans_train,
    mean_uer, quantize, unit_error_rate,
)

seqs = st.lists(st.integers(0, 5), max_size=12)


class TestEncodeFeatures:
    def test_passthrough(self):
        mel = np.random.default_rng(0).normal(size=(100, 80))
        out = encode_features(mel)
        assert out.shape == (100, 80)
        np.testing.assert_array_equal(out, mel)

    def test_empty(self):
        with pytest.raises(ShapeError):
            encode_features(np.zeros((0, 80)))


class TestKMeans:
    def test_two_clusters(self):
        cb = kmeans_train(np.array([[0.0], [0.0], [10.0], [10.0]]), 2, 10, 0)
        assert sorted(cb.centroids[:, 0].tolist()) == [0.0, 10.0]

    def test_monotone_inertia(self):
        x = np.random.default_rng(3).normal(size=(600, 4))
        hist = kmeans_train(x, 8, 25, 1).inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_k_equals_distinct(self):
        x = np.repeat(np.arange(5, dtype=float)[:, None], 3, axis=0)
        assert kmeans_train(x, 5, 10, 0).inertia_history[-1] == pytest.approx(0.0)

    def test_too_few_points(self):
        with pytest.raises(ClusteringError):
            kmeans_train(np.ones((10, 2)), 2, 5, 0)

    def test_no_duplicate_centroids(self):
        x = np.random.default_rng(0).integers(0, 3, size=(200, 2)).astype(float)
        cb = kmeans_train(x, 9, 20, 0)
        assert np.unique(cb.centroids, axis=0).shape[0] == 9

    def test_seeded(self):
        x = np.random.default_rng(1).normal(size=(300, 3))
        np.testing.assert_array_equal(kmeans_train(x, 4, 10, 7).centroids, kmeans_train(x, 4, 10, 7).centroids)


class TestQuantize:
    cb = Codebook(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 3.0], [5.0, 5.0], [0.0, 4.0]]))

    def test_exact_centroid(self):
        assert quantize(self.cb.centroids[3], self.cb).tolist() == [3]

    def test_tie_lowest(self):
        # equidistant (distance 1) from centroids 2 and 5
        assert quantize(np.array([[0.0, 3.0]]), self.cb).tolist() == [2]

    def test_identity(self):
        assert quantize(self.cb.centroids, self.cb).tolist() == list(range(6))

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            quantize(np.zeros((3, 3)), self.cb)

    def test_round_trip(self, tmp_path):
        self.cb.save(tmp_path / "cb.json")
        np.testing.assert_array_equal(Codebook.load(tmp_path / "cb.json").centroids, self.cb.centroids)


class TestCollapse:
    def test_runs(self):
        assert collapse_units([5, 5, 7, 7, 7, 5]).tolist() == [5, 7, 5]

    def test_empty(self):
        assert collapse_units([]).tolist() == []

    @given(seqs)
    def test_idempotent(self, s):
        once = collapse_units(s)
        assert collapse_units(once).tolist() == once.tolist()

    def test_keeps_type(self):
        out = collapse_units(UnitSequence([1, 1, 2], "u", 4))
        assert isinstance(out, UnitSequence) and out.utt_id == "u"


class TestUER:
    def test_identical(self):
        assert unit_error_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_one_deletion(self):
        assert unit_error_rate([1, 2, 3], [1, 3]) == pytest.approx(33.33, abs=0.01)

    def test_two_substitutions(self):
        assert unit_error_rate([1, 2], [3, 4]) == 100.0

    def test_empty_ref(self):
        with pytest.raises(MetricError):
            unit_error_rate([], [1])

    def test_collapses_first(self):
        assert unit_error_rate([1, 1, 2, 2], [1, 2, 2, 2]) == 0.0

    @given(seqs, seqs)
    @settings(max_examples=200)
    def test_edit_distance_matches_oracle(self, a, b):
        assert edit_distance(a, b) == levenshtein(a, b)

    @given(seqs.filter(bool), seqs.filter(bool))
    def test_length_weighted_symmetry(self, a, b):
        a, b = collapse_units(a), collapse_units(b)
        assert unit_error_rate(a, b) * len(a) == pytest.approx(unit_error_rate(b, a) * len(b))

    def test_mean(self):
        assert mean_uer([[1, 2], [1, 2, 3]], [[1, 2], [1, 3]]) == pytest.approx(100 / 6)

    def test_vocab_checked(self):
        with pytest.raises(VocabError):
            UnitSequence([0, 4], K=4)


class TestUnitizer:
    def test_fit_transform(self):
        rng = np.random.default_rng(0)
        mels = [rng.normal(size=(50, 6)) for _ in range(4)]
        u = Unitizer(n_units=5, max_iter=10)
        out = u.fit_transform(mels)
        assert [o.size for o in out] == [50] * 4
        assert u.get_params()["n_units"] == 5
        assert max(o.max() for o in out) < 5

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            Unitizer().transform([np.zeros((3, 4))])
