"""Overlap scores, kappa, AUC, accuracy, and report serialization."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drtricks.metrics import (
    MetricError,
    MetricsReport,
    UndefinedKappaError,
    accuracy,
    auc_macro_ovr,
    confusion_matrix,
    dsc,
    iou,
    mean_dsc,
    mean_iou,
    qwk,
    read_report_csv,
    regressor_class_scores,
    write_report_csv,
    write_report_json,
)


def direct_quadratic_kappa(cm: np.ndarray) -> float:
    """Independent textbook implementation used as the oracle."""
    cm = np.asarray(cm, dtype=float)
    n = cm.sum()
    c = cm.shape[0]
    observed = 0.0
    expected = 0.0
    row = cm.sum(axis=1)
    col = cm.sum(axis=0)
    for i in range(c):
        for j in range(c):
            w = ((i - j) ** 2) / ((c - 1) ** 2)
            observed += w * cm[i, j] / n
            expected += w * row[i] * col[j] / (n * n)
    return 1.0 - observed / expected


class TestOverlap:
    def test_dsc_examples(self):
        a = np.zeros((6, 6), dtype=np.uint8)
        a[0, :4] = 1
        b = np.zeros((6, 6), dtype=np.uint8)
        b[0, 2:4] = 1
        b[1, :2] = 1
        assert dsc(a, a) == 1.0
        assert dsc(a, b) == pytest.approx(0.5)
        assert dsc(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    def test_iou_examples(self):
        a = np.zeros((6, 6), dtype=np.uint8)
        a[0, :4] = 1
        b = np.zeros((6, 6), dtype=np.uint8)
        b[0, 2:4] = 1
        b[1, :2] = 1
        assert iou(a, a) == 1.0
        assert iou(a, b) == pytest.approx(2 / 6)
        assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_iou_never_exceeds_dsc(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, (7, 7))
        b = rng.integers(0, 2, (7, 7))
        assert iou(a, b) <= dsc(a, b) + 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        a = rng.integers(0, 2, (6, 6))
        b = rng.integers(0, 2, (6, 6))
        perm = rng.permutation(36)
        ap = a.ravel()[perm].reshape(6, 6)
        bp = b.ravel()[perm].reshape(6, 6)
        assert dsc(a, b) == dsc(ap, bp)
        assert iou(a, b) == iou(ap, bp)

    def test_mean_is_channel_mean(self):
        rng = np.random.default_rng(4)
        p = rng.integers(0, 2, (3, 5, 5))
        g = rng.integers(0, 2, (3, 5, 5))
        assert mean_dsc(p, g) == pytest.approx(np.mean([dsc(p[c], g[c])
                                                        for c in range(3)]))
        assert mean_iou(p, g) == pytest.approx(np.mean([iou(p[c], g[c])
                                                        for c in range(3)]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricError):
            dsc(np.zeros((4, 4)), np.zeros((5, 5)))


class TestConfusionAndKappa:
    def test_confusion_matrix_layout(self):
        cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 2])
        np.testing.assert_array_equal(cm, [[1, 1, 0], [0, 1, 0], [0, 0, 1]])

    def test_perfect_diagonal_is_one(self):
        assert qwk(np.diag([5, 3, 2])) == pytest.approx(1.0)

    def test_spec_matrix_matches_direct_kappa(self):
        cm = np.array([[5, 0, 0], [0, 0, 5], [0, 0, 5]])
        assert qwk(cm) == pytest.approx(direct_quadratic_kappa(cm), abs=1e-12)

    def test_independence_is_zero(self):
        marg = np.array([4.0, 2.0, 2.0])
        cm = np.outer(marg, marg) / marg.sum()
        assert qwk(cm) == pytest.approx(0.0, abs=1e-12)

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedKappaError):
            qwk(np.array([[7, 0, 0], [0, 0, 0], [0, 0, 0]]))

    def test_empty_matrix_rejected(self):
        with pytest.raises(MetricError):
            qwk(np.zeros((3, 3)))

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=50, deadline=None)
    def test_transpose_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        cm = rng.integers(0, 9, (3, 3))
        cm[0, 1] += 1  # guarantee two classes in the marginals
        cm[1, 0] += 1
        assert qwk(cm) == pytest.approx(qwk(cm.T), abs=1e-12)


class TestAuc:
    def test_perfect_separation(self):
        scores = np.array([[0.9, 0.1, 0.0], [0.8, 0.1, 0.1],
                           [0.1, 0.9, 0.0], [0.0, 0.1, 0.9]])
        truths = [0, 0, 1, 2]
        val, skipped = auc_macro_ovr(scores, truths)
        assert val == pytest.approx(1.0)
        assert skipped == []

    def test_all_ties_half(self):
        scores = np.zeros((6, 3))
        val, _ = auc_macro_ovr(scores, [0, 0, 1, 1, 2, 2])
        assert val == pytest.approx(0.5)

    def test_four_sample_hand_case_vs_pairwise(self):
        scores = np.array([0.1, 0.4, 0.35, 0.8])
        positives = np.array([False, False, True, True])
        wins = 0.0
        for sp in scores[positives]:
            for sn in scores[~positives]:
                wins += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
        oracle = wins / 4.0
        full = np.stack([-scores, scores, np.zeros(4)], axis=1)
        val, skipped = auc_macro_ovr(full, [0, 0, 1, 1])
        assert skipped == [2]
        # class 0 uses -scores (same ordering story), class 1 uses scores
        assert val == pytest.approx(oracle)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.normal(size=(30, 3))
        truths = rng.integers(0, 3, 30).tolist()
        truths[0], truths[1], truths[2] = 0, 1, 2
        a, _ = auc_macro_ovr(scores, truths)
        b, _ = auc_macro_ovr(np.exp(scores) * 3.0 + 1.0, truths)
        assert a == pytest.approx(b, abs=1e-12)

    def test_missing_class_skipped_and_reported(self):
        scores = np.random.default_rng(1).normal(size=(10, 3))
        val, skipped = auc_macro_ovr(scores, [0, 1] * 5)
        assert skipped == [2]
        assert 0.0 <= val <= 1.0

    def test_no_evaluable_class_rejected(self):
        with pytest.raises(MetricError):
            auc_macro_ovr(np.zeros((4, 3)), [0, 0, 0, 0])

    def test_regressor_scores_shape_and_order(self):
        s = regressor_class_scores(np.array([0.0, 1.0, 2.4]))
        assert s.shape == (3, 3)
        assert s[0].argmax() == 0 and s[2].argmax() == 2
        assert s[2, 2] == pytest.approx(-0.4)


class TestAccuracy:
    def test_examples(self):
        assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
        assert accuracy([0, 0, 0], [1, 1, 1]) == 0.0
        assert accuracy([0, 1, 2, 2], [0, 1, 2, 1]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            accuracy([], [])


class TestReport:
    def make(self):
        return MetricsReport("grading", {("qwk", ""): 0.75, ("dsc", "np"): 0.5},
                             seed=3, config_digest="abc123")

    def test_non_finite_rejected(self):
        with pytest.raises(MetricError):
            MetricsReport("grading", {("qwk", ""): float("nan")}, 0, "x")

    def test_csv_roundtrip(self, tmp_path):
        report = self.make()
        write_report_csv(tmp_path / "r.csv", report)
        rows = read_report_csv(tmp_path / "r.csv")
        assert len(rows) == 2
        by_metric = {(r["metric"], r["class"]): r for r in rows}
        assert float(by_metric[("qwk", "")]["value"]) == 0.75
        assert by_metric[("dsc", "np")]["config_digest"] == "abc123"
        assert by_metric[("qwk", "")]["seed"] == "3"

    def test_json_mirror(self, tmp_path):
        import json
        report = self.make()
        write_report_json(tmp_path / "r.json", report)
        payload = json.loads((tmp_path / "r.json").read_text())
        assert payload["task"] == "grading"
        values = {(m["metric"], m["class"]): m["value"] for m in payload["metrics"]}
        assert values[("qwk", "")] == 0.75
