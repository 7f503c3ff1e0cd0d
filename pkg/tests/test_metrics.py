import math

import numpy as np
import pytest

from geomae.errors import InvalidArgumentError
from geomae.metrics import ConfusionMatrix, confusion, regression_scores, scores


class TestConfusion:
    def test_perfect_is_diagonal(self):
        y = [0, 1, 2, 2, 1]
        assert confusion(y, y, 3).counts.tolist() == [[1, 0, 0], [0, 2, 0], [0, 0, 2]]

    def test_single_pixel(self):
        cm = confusion([0], [1], 2)
        assert cm.counts[1][0] == 1 and cm.counts.sum() == 1

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            confusion([0, 2], [0, 1], 2)
        with pytest.raises(InvalidArgumentError):
            confusion([0, 1], [0, -1], 2)

    def test_images_flatten_and_add(self):
        pred = np.array([[0, 1], [1, 1]])
        true = np.array([[0, 0], [1, 1]])
        cm = confusion(pred, true, 2)
        assert (cm + cm).counts.tolist() == [[2, 2], [0, 4]]


class TestScores:
    def test_perfect(self):
        s = scores(ConfusionMatrix(np.array([[5, 0], [0, 7]])))
        for k in ("overall_acc", "miou", "macro_f1", "weighted_f1", "precision", "recall"):
            assert s[k] == 1.0
        assert s["per_class_iou"] == [1.0, 1.0]

    def test_hand_counted(self):
        s = scores(ConfusionMatrix(np.array([[2, 1], [0, 3]])))
        assert s["per_class_iou"] == pytest.approx([2 / 3, 3 / 4], rel=1e-15)
        assert s["miou"] == pytest.approx(17 / 24, rel=1e-15)
        assert s["overall_acc"] == pytest.approx(5 / 6)
        # F1_0 = 4/5, F1_1 = 6/7
        assert s["per_class_f1"] == pytest.approx([0.8, 6 / 7])
        assert s["macro_f1"] == pytest.approx((0.8 + 6 / 7) / 2)
        assert s["weighted_f1"] == pytest.approx((3 * 0.8 + 3 * 6 / 7) / 6)
        assert s["precision"] == pytest.approx((1.0 + 0.75) / 2)
        assert s["recall"] == pytest.approx((2 / 3 + 1.0) / 2)

    def test_constant_predictor(self):
        s = scores(confusion([0, 0, 0, 0], [0, 1, 0, 1], 2))
        assert s["overall_acc"] == 0.5

    def test_absent_class_excluded(self):
        s = scores(confusion([0, 1, 1], [0, 1, 1], 3))
        assert s["miou"] == 1.0 and math.isnan(s["per_class_iou"][2])
        assert scores(confusion([0, 1, 1], [0, 1, 1], 3), include_empty=True)["miou"] == pytest.approx(2 / 3)

    def test_empty(self):
        with pytest.raises(InvalidArgumentError):
            scores(ConfusionMatrix(np.zeros((2, 2), dtype=np.int64)))


class TestRegression:
    def test_perfect(self):
        assert regression_scores([1, 2, 3], [1, 2, 3]) == {"rmse": 0.0, "r2": 1.0}

    def test_mean_predictor(self):
        t = np.array([1.0, 4.0, 2.0, 7.0])
        assert regression_scores(np.full(4, t.mean()), t)["r2"] == pytest.approx(0.0, abs=1e-15)

    def test_five_points(self):
        t = [1.0, 2.0, 3.0, 4.0, 5.0]
        p = [1.5, 1.5, 3.5, 3.5, 5.0]
        # sse = 4 * 0.25 = 1, sst = 10
        s = regression_scores(p, t)
        assert s["r2"] == pytest.approx(0.9, rel=1e-15)
        assert s["rmse"] == pytest.approx(math.sqrt(0.2), rel=1e-15)

    def test_zero_variance(self):
        with pytest.raises(InvalidArgumentError, match="undefined"):
            regression_scores([1, 2], [3, 3])
