import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from agsp.metrics import MetricsAccumulator, MetricsError, format_table


def brute_force_iou(pred, y, k):
    """IoU per class from explicit pixel sets; NaN where the union is empty."""
    out = []
    coords = [(i, j) for i in range(y.shape[0]) for j in range(y.shape[1])]
    for c in range(k):
        p = {q for q in coords if pred[q] == c}
        g = {q for q in coords if y[q] == c}
        union = p | g
        out.append(len(p & g) / len(union) if union else np.nan)
    return np.array(out)


class TestAccumulate:
    def test_perfect_single_class(self):
        acc = MetricsAccumulator(3).accumulate(np.full((4, 4), 2), np.full((4, 4), 2))
        assert acc.confusion[2, 2] == 16
        assert acc.confusion.sum() == 16

    def test_commutes(self):
        rng = np.random.default_rng(0)
        a = [rng.integers(0, 3, (4, 4)) for _ in range(4)]
        ab = MetricsAccumulator(3).accumulate(a[0], a[1]).accumulate(a[2], a[3])
        ba = MetricsAccumulator(3).accumulate(a[2], a[3]).accumulate(a[0], a[1])
        assert np.array_equal(ab.confusion, ba.confusion)

    def test_pair_counting(self):
        rng = np.random.default_rng(1)
        pred, y = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
        valid = rng.random((8, 8)) > 0.2
        expected = np.zeros((4, 4), int)
        for i in range(8):
            for j in range(8):
                if valid[i, j]:
                    expected[y[i, j], pred[i, j]] += 1
        acc = MetricsAccumulator(4).accumulate(pred, y, valid)
        assert np.array_equal(acc.confusion, expected)
        assert acc.total == valid.sum()

    def test_out_of_range(self):
        with pytest.raises(MetricsError):
            MetricsAccumulator(2).accumulate(np.array([[2]]), np.array([[0]]))
        with pytest.raises(MetricsError):
            MetricsAccumulator(2).accumulate(np.array([[0]]), np.array([[5]]))

    def test_shape_mismatch(self):
        with pytest.raises(MetricsError):
            MetricsAccumulator(2).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))

    def test_chunking_invariance(self):
        rng = np.random.default_rng(2)
        pred, y = rng.integers(0, 3, (6, 16, 16)), rng.integers(0, 3, (6, 16, 16))
        whole = MetricsAccumulator(3).accumulate(pred, y)
        shards = [MetricsAccumulator(3).accumulate(pred[i], y[i]) for i in range(6)]
        merged = shards[0]
        for s in shards[1:]:
            merged = merged + s
        assert np.array_equal(whole.confusion, merged.confusion)
        assert whole.miou()[1] == merged.miou()[1]


class TestMiou:
    def test_perfect(self):
        y = np.array([[0, 1], [1, 0]])
        iou, m = MetricsAccumulator(3).accumulate(y, y).miou()
        assert iou[0] == 1.0 and iou[1] == 1.0 and np.isnan(iou[2])
        assert m == 1.0

    def test_hand_case(self):
        acc = MetricsAccumulator(2).accumulate(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
        iou, m = acc.miou()
        np.testing.assert_allclose(iou, [0.5, 2 / 3], rtol=0, atol=1e-15)
        assert abs(m - 0.58333) <= 1e-5
        assert abs(m - 7 / 12) <= 1e-12

    def test_strict_mode(self):
        y = np.array([[0, 1]])
        _, m = MetricsAccumulator(4).accumulate(y, y).miou(strict=True)
        assert m == 0.5

    def test_empty(self):
        with pytest.raises(MetricsError, match="empty evaluation"):
            MetricsAccumulator(3).miou()

    def test_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            h, w = rng.integers(1, 17, size=2)
            k = int(rng.integers(2, 6))
            pred, y = rng.integers(0, k, (h, w)), rng.integers(0, k, (h, w))
            iou, _ = MetricsAccumulator(k).accumulate(pred, y).miou()
            assert np.array_equal(iou, brute_force_iou(pred, y, k), equal_nan=True)

    @given(st.integers(0, 2**31))
    def test_bounds_and_class_permutation(self, seed):
        rng = np.random.default_rng(seed)
        pred, y = rng.integers(0, 4, (6, 6)), rng.integers(0, 4, (6, 6))
        iou, m = MetricsAccumulator(4).accumulate(pred, y).miou()
        present = ~np.isnan(iou)
        assert np.all((iou[present] >= 0) & (iou[present] <= 1))
        perm = rng.permutation(4)
        _, m2 = MetricsAccumulator(4).accumulate(perm[pred], perm[y]).miou()
        assert m2 == pytest.approx(m, rel=1e-12)


def test_table_layout():
    text = format_table(["Background", "Weed"], np.array([0.75, np.nan]), 0.75, title="Ours")
    lines = text.splitlines()
    assert lines[0].split("|")[0].strip() == "Method"
    assert "75.00" in lines[2] and "-" in lines[2]
    assert len({len(l) for l in lines}) == 1
