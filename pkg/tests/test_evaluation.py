import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsgan.errors import ContractError, EpisodeError
from fsgan.evaluation import (
    baseline_ros,
    baseline_smote,
    compute_metrics,
    median_heuristic,
    mmd_rbf,
    sample_episode,
    score_analog,
)

from oracles import confusion_metrics, on_segment


class TestEpisodes:
    X = np.arange(300, dtype=float).reshape(-1, 1)
    y = np.repeat([0, 1, 2], 100)

    def test_two_way_thirty_shot(self):
        ep = sample_episode(self.X, self.y, 2, 30, rng=0)
        assert ep.support_x.shape == (60, 1)
        assert np.bincount(ep.support_y).tolist() == [30, 30]
        assert len(ep.query_y) == 140

    def test_support_and_query_disjoint(self):
        ep = sample_episode(self.X, self.y, 3, 10, query_per_class=20, rng=1)
        assert not set(ep.support_idx) & set(ep.query_idx)
        assert np.bincount(ep.query_y).tolist() == [20, 20, 20]

    def test_labels_are_local_and_consistent(self):
        ep = sample_episode(self.X, self.y, 2, 5, rng=2)
        for local, cls in enumerate(ep.classes):
            assert np.all(self.y[ep.support_idx[ep.support_y == local]] == cls)
            assert np.all(self.y[ep.query_idx[ep.query_y == local]] == cls)

    def test_same_seed_same_episode(self):
        a = sample_episode(self.X, self.y, 2, 5, rng=3)
        b = sample_episode(self.X, self.y, 2, 5, rng=3)
        np.testing.assert_array_equal(a.support_idx, b.support_idx)
        np.testing.assert_array_equal(a.query_idx, b.query_idx)

    def test_too_few_rows_names_class(self):
        y = np.r_[np.zeros(50), np.ones(8)].astype(int)
        with pytest.raises(EpisodeError, match=r"\[1\]"):
            sample_episode(np.zeros((58, 1)), y, 2, 10, rng=0)


class TestMetrics:
    def test_perfect(self):
        r = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1])
        assert (r.acc, r.pre, r.f1) == (1.0, 1.0, 1.0)

    def test_hand_values(self):
        r = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1])
        assert r.acc == 0.75
        assert r.pre == pytest.approx((1.0 + 2 / 3) / 2, abs=1e-15)
        assert r.f1 == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-15)

    def test_constant_predictor(self):
        assert compute_metrics([1, 1, 1, 1], [0, 0, 1, 1]).acc == 0.5

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            compute_metrics([0, 1], [0, 1, 1])

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda c: st.tuples(st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=40))))
    def test_matches_confusion_oracle(self, case):
        c, pairs = case
        pred, truth = [p for p, _ in pairs], [t for _, t in pairs]
        r = compute_metrics(pred, truth, labels=np.arange(c))
        assert (r.acc, r.pre, r.f1) == confusion_metrics(pred, truth, c)


class TestMmd:
    def test_identical_samples(self):
        X = np.random.default_rng(0).normal(size=(100, 3))
        assert mmd_rbf(X, X) <= 1e-12

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        X, Y = rng.normal(size=(80, 2)), rng.normal(size=(50, 2)) + 0.5
        assert abs(mmd_rbf(X, Y) - mmd_rbf(Y, X)) <= 1e-12

    def test_separated_normals(self):
        for rep in range(10):
            rng = np.random.default_rng([2, rep])
            assert mmd_rbf(rng.normal(size=(500, 1)), rng.normal(5.0, 1.0, size=(500, 1))) > 0.5

    def test_same_distribution(self):
        for rep in range(10):
            rng = np.random.default_rng([3, rep])
            assert abs(mmd_rbf(rng.normal(size=(500, 1)), rng.normal(size=(500, 1)))) <= 0.02

    def test_dim_mismatch(self):
        with pytest.raises(ContractError):
            mmd_rbf(np.zeros((3, 2)), np.zeros((3, 1)))

    def test_median_heuristic_order_free(self):
        rng = np.random.default_rng(4)
        X, Y = rng.normal(size=(30, 2)), rng.normal(size=(40, 2))
        assert median_heuristic(X, Y) == median_heuristic(Y, X)


class TestScoreAnalog:
    def test_uniform_classifier(self):
        assert score_analog(np.zeros((10, 2)), lambda x: np.full((len(x), 4), 0.25)) == pytest.approx(1.0, abs=1e-12)

    def test_collapsed(self):
        assert score_analog(np.zeros((10, 2)), lambda x: np.tile([0, 1.0, 0], (len(x), 1))) == pytest.approx(1.0, abs=1e-12)

    def test_confident_and_balanced(self):
        probs = np.tile(np.eye(5), (4, 1))
        assert score_analog(np.zeros((20, 1)), lambda x: probs) == pytest.approx(5.0, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ContractError):
            score_analog(np.empty((0, 2)), lambda x: x)


class TestBaselines:
    def test_ros_at_target_is_unchanged(self):
        X, y = np.arange(6.0).reshape(-1, 1), np.array([0, 0, 0, 1, 1, 1])
        Xo, yo = baseline_ros(X, y, 3, np.random.default_rng(0))
        np.testing.assert_array_equal(Xo, X)
        np.testing.assert_array_equal(yo, y)

    def test_ros_single_row(self):
        Xo, yo = baseline_ros(np.array([[2.0, 3.0]]), np.array([4]), 5, np.random.default_rng(0))
        np.testing.assert_array_equal(Xo, np.tile([2.0, 3.0], (5, 1)))
        assert yo.tolist() == [4] * 5

    def test_ros_exact_targets_and_real_rows(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(17, 3)), np.r_[np.zeros(5), np.ones(12)].astype(int)
        Xo, yo = baseline_ros(X, y, 40, rng)
        assert np.bincount(yo).tolist() == [40, 40]
        for row, lab in zip(Xo, yo):
            assert any(np.array_equal(row, r) for r in X[y == lab])

    def test_smote_two_points_on_segment(self):
        a, b = np.array([0.0, 1.0]), np.array([2.0, -1.0])
        Xo, _ = baseline_smote(np.vstack([a, b]), np.array([0, 0]), 50, 1, np.random.default_rng(2))
        assert all(on_segment(p, a, b) for p in Xo)

    def test_smote_zero_gap_copies(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(6, 2))
        Xo, _ = baseline_smote(X, np.zeros(6, dtype=int), 20, 2, rng, gap=0.0)
        for row in Xo:
            assert any(np.array_equal(row, r) for r in X)

    def test_smote_singleton_warns(self):
        with pytest.warns(UserWarning, match="single row"):
            Xo, _ = baseline_smote(np.array([[1.0]]), np.array([0]), 3, 5, np.random.default_rng(0))
        np.testing.assert_array_equal(Xo, np.ones((3, 1)))

    def test_target_below_count(self):
        with pytest.raises(ContractError):
            baseline_ros(np.zeros((3, 1)), np.zeros(3, dtype=int), 2, np.random.default_rng(0))


def test_score_analog_closed_form_mixture():
    # half the samples one-hot on class 0, half uniform over 2 classes:
    # p(y) = (0.75, 0.25); KL terms log(1/0.75) and 0.5*log(0.5/0.75)+0.5*log(0.5/0.25)
    probs = np.vstack([np.tile([1.0, 0.0], (5, 1)), np.tile([0.5, 0.5], (5, 1))])
    kl = 0.5 * math.log(1 / 0.75) + 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))
    assert score_analog(np.zeros((10, 1)), lambda x: probs) == pytest.approx(math.exp(kl), rel=1e-12)
