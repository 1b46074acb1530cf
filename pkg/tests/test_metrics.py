import numpy as np
import pytest

from coupled_labels.metrics import (
    MetricError,
    UndefinedAucError,
    fold_agreement,
    macro_auc,
    pearson_label_correlation,
    per_label_fold_std,
    probability_histograms,
    roc_auc,
)
from helpers import brute_force_auc


class TestRocAuc:
    def test_perfect_ranking(self):
        assert roc_auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_matches_pair_count_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(5, 60))
            # integer-grid scores force heavy ties
            scores = rng.integers(0, 8, size=n).astype(float) / 2.0
            targets = (rng.random(n) < 0.4).astype(int)
            if targets.sum() in (0, n):
                continue
            assert roc_auc(scores, targets) == brute_force_auc(scores, targets)

    def test_single_class_raises(self):
        with pytest.raises(UndefinedAucError):
            roc_auc([0.1, 0.9], [1, 1])

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=30)
        targets = (rng.random(30) < 0.5).astype(int)
        base = roc_auc(scores, targets)
        assert roc_auc(np.exp(scores), targets) == pytest.approx(base, abs=1e-12)
        assert roc_auc(3.0 * scores + 7.0, targets) == pytest.approx(base, abs=1e-12)

    def test_complement_identity_without_ties(self):
        rng = np.random.default_rng(2)
        scores = rng.permutation(40).astype(float)
        targets = (rng.random(40) < 0.5).astype(int)
        assert roc_auc(scores, targets) + roc_auc(-scores, targets) == pytest.approx(
            1.0, abs=1e-12
        )


class TestMacroAuc:
    def test_single_class_label_skipped(self):
        probs = np.array([[0.9, 0.4], [0.1, 0.6], [0.8, 0.5]])
        labels = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
        report = macro_auc(probs, labels)
        assert report.skipped_labels == [1]
        assert report.per_label_auc[1] is None
        assert report.macro_auc == report.per_label_auc[0] == 1.0

    def test_perfect_predictions(self):
        labels = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.0, 0.0]])
        report = macro_auc(labels.copy(), labels)
        assert report.macro_auc == 1.0

    def test_matches_per_label_oracle(self):
        rng = np.random.default_rng(3)
        probs = rng.random((30, 4))
        labels = (rng.random((30, 4)) < 0.5).astype(float)
        report = macro_auc(probs, labels)
        oracle = np.mean(
            [brute_force_auc(probs[:, l], labels[:, l]) for l in range(4)]
        )
        assert report.macro_auc == pytest.approx(oracle, abs=1e-12)

    def test_all_labels_skipped(self):
        with pytest.raises(UndefinedAucError):
            macro_auc(np.random.rand(3, 2), np.ones((3, 2)))

    def test_label_permutation_invariance(self):
        rng = np.random.default_rng(4)
        probs = rng.random((25, 5))
        labels = (rng.random((25, 5)) < 0.4).astype(float)
        base = macro_auc(probs, labels).macro_auc
        perm = rng.permutation(5)
        assert macro_auc(probs[:, perm], labels[:, perm]).macro_auc == pytest.approx(
            base, abs=1e-12
        )


class TestPearson:
    def test_duplicated_column(self):
        rng = np.random.default_rng(5)
        col = rng.random(50)
        probs = np.stack([col, col, rng.random(50)], axis=1)
        corr = pearson_label_correlation(probs)
        assert corr[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_complement_column(self):
        rng = np.random.default_rng(6)
        col = rng.random(50)
        probs = np.stack([col, 1.0 - col], axis=1)
        corr = pearson_label_correlation(probs)
        assert corr[0, 1] == pytest.approx(-1.0, abs=1e-12)

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(7)
        probs = rng.random((100, 3))
        corr = pearson_label_correlation(probs)
        mu = probs.mean(axis=0)
        centered = probs - mu
        cov = centered.T @ centered / probs.shape[0]
        sd = np.sqrt(np.diag(cov))
        oracle = cov / np.outer(sd, sd)
        np.testing.assert_allclose(corr, oracle, atol=1e-12)
        assert np.all(np.abs(corr) <= 1.0)
        np.testing.assert_allclose(np.diag(corr), np.ones(3), atol=1e-15)

    def test_zero_variance_column_reported_absent(self):
        probs = np.stack([np.full(10, 0.5), np.linspace(0, 1, 10)], axis=1)
        corr = pearson_label_correlation(probs)
        assert np.isnan(corr[0, 1]) and np.isnan(corr[1, 0])
        assert corr[1, 1] == 1.0


class TestFoldAgreement:
    def test_identical_folds_unanimous(self):
        rng = np.random.default_rng(8)
        probs = rng.random((10, 4))
        agreement = fold_agreement([probs, probs.copy(), probs.copy()])
        assert agreement.unanimous_cells == 40
        assert agreement.split_cells == 0
        np.testing.assert_allclose(agreement.pair_agreement, np.ones((3, 3)))

    def test_one_flipped_fold(self):
        rng = np.random.default_rng(9)
        probs = rng.random((10, 4)) * 0.4  # all below threshold
        flipped = probs + 0.6               # all above
        agreement = fold_agreement([probs, probs.copy(), flipped])
        assert agreement.majority_counts == {2: 40}
        assert agreement.unanimous_cells == 0

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(10)
        folds = [rng.random((12, 3)) for _ in range(3)]
        agreement = fold_agreement(folds)
        binary = [(f >= 0.5).astype(int) for f in folds]
        unanimous = split = 0
        counts = {}
        for i in range(12):
            for l in range(3):
                votes = [b[i, l] for b in binary]
                majority = max(votes.count(0), votes.count(1))
                counts[majority] = counts.get(majority, 0) + 1
                if majority == 3:
                    unanimous += 1
                else:
                    split += 1
        assert agreement.unanimous_cells == unanimous
        assert agreement.split_cells == split
        assert agreement.majority_counts == counts
        for a in range(3):
            for b in range(3):
                expected = float(np.mean(binary[a] == binary[b]))
                assert agreement.pair_agreement[a, b] == pytest.approx(expected)

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            fold_agreement([np.zeros((3, 2)), np.zeros((4, 2))])


class TestPerLabelFoldStd:
    def test_identical_folds_zero(self):
        probs = np.random.default_rng(11).random((8, 3))
        np.testing.assert_array_equal(
            per_label_fold_std([probs, probs.copy()]), np.zeros(3)
        )

    def test_opposite_binary_folds(self):
        a = np.zeros((5, 2))
        b = np.ones((5, 2))
        np.testing.assert_allclose(per_label_fold_std([a, b]), [0.5, 0.5])

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(12)
        folds = [rng.random((20, 4)) for _ in range(3)]
        result = per_label_fold_std(folds)
        stack = np.stack(folds)
        oracle = np.sqrt(((stack - stack.mean(axis=0)) ** 2).mean(axis=0)).mean(axis=0)
        np.testing.assert_allclose(result, oracle, atol=1e-12)


class TestHistograms:
    def test_half_open_convention(self):
        # 0.5 with two bins lands in the upper bin
        counts = probability_histograms(np.full((4, 1), 0.5), bins=2)
        np.testing.assert_array_equal(counts, [[0, 4]])

    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(13)
        probs = rng.random((37, 5))
        counts = probability_histograms(probs, bins=20)
        np.testing.assert_array_equal(counts.sum(axis=1), np.full(5, 37))

    def test_uniform_grid_one_per_bin(self):
        grid = (np.arange(20) / 20.0).reshape(-1, 1)
        counts = probability_histograms(grid, bins=20)
        np.testing.assert_array_equal(counts, np.ones((1, 20), dtype=int))

    def test_probability_one_in_last_bin(self):
        counts = probability_histograms(np.array([[1.0]]), bins=10)
        assert counts[0, -1] == 1
