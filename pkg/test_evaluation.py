"""
Tests for metrics, multi-seed aggregation and report files
"""

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from evaluation import (
    confusion_matrix_pct,
    evaluate_scores,
    macro_f1,
    macro_precision_recall,
    multi_seed_report,
    objective_value,
    per_anomaly_type_reports,
    reports_table,
    roc_auc,
    write_reports,
)
from exceptions import DataError, NumericalError, SeedRunError, exit_code_for
from models import ScoredSet


def pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


# ============================================================
# ROC AUC
# ============================================================


class TestRocAuc:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_pairwise_count_with_ties(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.integers(0, 15, size=200).astype(float)
        labels = rng.integers(0, 2, size=200)
        auc = roc_auc(ScoredSet(scores, labels))
        assert auc == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)
        assert auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_perfect_and_reversed(self):
        labels = np.array([0, 0, 1, 1])
        assert roc_auc(ScoredSet([0.1, 0.2, 0.3, 0.4], labels)) == 1.0
        assert roc_auc(ScoredSet([0.4, 0.3, 0.2, 0.1], labels)) == 0.0
        assert roc_auc(ScoredSet([1.0, 1.0, 1.0, 1.0], labels)) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            roc_auc(ScoredSet([0.1, 0.2], [1, 1]))

    def test_nan_rejected(self):
        with pytest.raises(NumericalError):
            roc_auc(ScoredSet([0.1, np.nan], [0, 1]))


# ============================================================
# Label metrics
# ============================================================


class TestLabelMetrics:
    def test_all_anomalous_predictor(self):
        labels = np.array([0] * 50 + [1] * 50)
        report = evaluate_scores(np.ones(100), labels)
        assert report.recall_macro == pytest.approx(0.5)
        np.testing.assert_allclose(report.confusion, [[0.0, 100.0], [0.0, 100.0]])
        assert report.precision_macro == pytest.approx(0.25)

    def test_hand_computed_macro_metrics(self):
        truth = np.array([0, 0, 0, 0, 1, 1])
        pred = np.array([0, 0, 1, 0, 1, 0])
        precision, recall = macro_precision_recall(pred, truth)
        # class 0: precision 3/4, recall 3/4; class 1: precision 1/2, recall 1/2
        assert precision == pytest.approx((0.75 + 0.5) / 2)
        assert recall == pytest.approx((0.75 + 0.5) / 2)
        assert macro_f1(pred, truth) == pytest.approx((0.75 + 0.5) / 2)
        np.testing.assert_allclose(confusion_matrix_pct(pred, truth), [[75.0, 25.0], [50.0, 50.0]])

    def test_missing_class_gives_nan_row(self):
        confusion = confusion_matrix_pct(np.array([0, 1]), np.array([0, 0]))
        np.testing.assert_allclose(confusion[0], [50.0, 50.0])
        assert np.all(np.isnan(confusion[1]))

    def test_zero_score_counts_as_normal(self):
        report = evaluate_scores(np.array([0.0, 0.0, 1.0, 1.0]), np.array([0, 0, 1, 1]))
        np.testing.assert_allclose(report.confusion, [[100.0, 0.0], [0.0, 100.0]])

    def test_objective_value(self):
        report = evaluate_scores(np.array([-1.0, 1.0, -1.0, 1.0]), np.array([0, 1, 1, 0]))
        assert objective_value(report) == report.roc_auc
        assert objective_value(report, imbalance=True) == pytest.approx((report.roc_auc + report.f1_macro) / 2)


# ============================================================
# Aggregation and reports
# ============================================================


class TestAggregation:
    def test_mean_auc_and_best_seed(self):
        runs = {
            0: evaluate_scores(np.array([0.1, 0.2, 0.3, 0.4]), np.array([0, 1, 0, 1])),
            1: evaluate_scores(np.array([0.1, 0.2, 0.3, 0.4]), np.array([0, 0, 1, 1])),
            2: evaluate_scores(np.array([0.4, 0.3, 0.2, 0.1]), np.array([0, 0, 1, 1])),
        }
        report = multi_seed_report(lambda seed: runs[seed], [0, 1, 2])
        assert report.roc_auc == pytest.approx(np.mean([runs[s].roc_auc for s in runs]))
        assert report.seed == 1
        assert report.seeds == [0, 1, 2]
        assert report.auc_max == 1.0
        assert report.auc_min == 0.0
        assert report.precision_macro == runs[1].precision_macro

    def test_failing_seed_is_named(self):
        def run(seed):
            if seed == 7:
                raise NumericalError("loss diverged")
            return evaluate_scores(np.array([0.0, 1.0]), np.array([0, 1]))

        with pytest.raises(SeedRunError, match="seed 7") as info:
            multi_seed_report(run, [6, 7])
        assert exit_code_for(info.value) == 4

    def test_per_anomaly_type(self):
        scores = np.array([-1.0, -0.5, 2.0, 0.5, -2.0])
        labels = np.array([0, 0, 1, 1, 1])
        types = ["none", "none", "drilling", "sawing", "sawing"]
        reports = per_anomaly_type_reports(scores, labels, types)
        assert sorted(reports) == ["drilling", "sawing"]
        assert reports["drilling"].roc_auc == 1.0
        assert reports["sawing"].roc_auc == pytest.approx(0.5)

    def test_written_reports_are_deterministic(self, tmp_path):
        report = multi_seed_report(
            lambda seed: evaluate_scores(np.array([0.1, -0.2, 0.3, -0.4]) * (seed + 1), np.array([0, 1, 1, 0])), [0, 1]
        )
        first = write_reports({"early": report}, str(tmp_path / "a"))
        second = write_reports({"early": report}, str(tmp_path / "b"))
        for path_a, path_b in zip(first, second):
            assert open(path_a, "rb").read() == open(path_b, "rb").read()
        assert "early" in open(first[1], encoding="utf-8").read()

    def test_table_shows_spread_over_seeds(self):
        runs = [evaluate_scores(np.array([0.1, 0.2]), np.array([0, 1])), evaluate_scores(np.array([0.2, 0.1]), np.array([0, 1]))]
        report = multi_seed_report(lambda seed: runs[seed], [0, 1])
        table = reports_table({"late": report})
        assert "±" in table
        assert "Confusion Matrix" in table

    def test_no_reports(self, tmp_path):
        with pytest.raises(DataError):
            write_reports({}, str(tmp_path))
