import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2fcd.metrics import (ConfusionCounts, binarize, compute_metrics, confusion,
                           format_percent, render_confusion_map, write_metrics_csv,
                           METRICS_CSV_HEADER, TP_COLOR, TN_COLOR, FP_COLOR, FN_COLOR)


def naive_confusion(pred, gt):
    """Independent oracle: explicit per-pixel double loop."""
    tp = tn = fp = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = int(pred[i, j]), int(gt[i, j])
            if p == 1 and g == 1:
                tp += 1
            elif p == 0 and g == 0:
                tn += 1
            elif p == 1 and g == 0:
                fp += 1
            else:
                fn += 1
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def naive_metrics(c):
    """Independent oracle: literal formula evaluation, harmonic-mean F1."""
    t = c.tp + c.tn + c.fp + c.fn
    pre = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    rec = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2.0 / (1.0 / pre + 1.0 / rec) if pre > 0 and rec > 0 else 0.0
    oa = (c.tp + c.tn) / t
    iou = c.tp / (c.tp + c.fn + c.fp) if c.tp + c.fn + c.fp else 0.0
    chance = ((c.tp + c.fn) * (c.tp + c.fp) + (c.tn + c.fp) * (c.tn + c.fn)) / t ** 2
    if 1.0 - chance < 1e-12:
        kc = 1.0 if oa == 1.0 else 0.0
    else:
        kc = (oa - chance) / (1.0 - chance)
    return f1, pre, rec, oa, kc, iou


class TestBinarize:
    def test_zero_logit_is_negative_at_half(self):
        assert binarize(np.array([0.0])).tolist() == [0]

    def test_logit_one_is_positive(self):
        assert binarize(np.array([1.0])).tolist() == [1]

    def test_logit_minus_one_is_negative(self):
        assert binarize(np.array([-1.0])).tolist() == [0]

    def test_probability_input(self):
        probs = np.array([0.4, 0.5, 0.6])
        assert binarize(probs, from_logits=False).tolist() == [0, 0, 1]

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            binarize(np.array([np.nan]))


class TestConfusion:
    def test_perfect_prediction(self):
        gt = np.array([[1, 0], [0, 1]])
        c = confusion(gt, gt)
        assert c.fp == 0 and c.fn == 0

    def test_total_disagreement(self):
        gt = np.array([[1, 0], [0, 1]])
        c = confusion(1 - gt, gt)
        assert c.tp == 0 and c.tn == 0

    def test_two_by_two_enumeration(self):
        pred = np.array([[1, 0], [1, 0]])
        gt = np.array([[1, 1], [0, 0]])
        c = confusion(pred, gt)
        assert (c.tp, c.fn, c.fp, c.tn) == (1, 1, 1, 1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_nonbinary_values(self):
        with pytest.raises(ValueError):
            confusion(np.array([[2]]), np.array([[1]]))

    def test_merge_is_fieldwise_addition(self):
        rng = np.random.default_rng(0)
        a_pred, a_gt = rng.integers(0, 2, (2, 8, 8))
        b_pred, b_gt = rng.integers(0, 2, (2, 4, 4))
        merged = confusion(a_pred, a_gt) + confusion(b_pred, b_gt)
        pooled = confusion(np.concatenate([a_pred.ravel(), b_pred.ravel()])[None],
                           np.concatenate([a_gt.ravel(), b_gt.ravel()])[None])
        assert merged == pooled


class TestComputeMetrics:
    def test_hand_derived_case(self):
        m = compute_metrics(ConfusionCounts(tp=3, fp=1, fn=2, tn=4))
        assert m.precision == pytest.approx(0.75, abs=1e-12)
        assert m.recall == pytest.approx(0.6, abs=1e-12)
        assert m.f1 == pytest.approx(2.0 / 3.0, abs=1e-12)
        assert m.oa == pytest.approx(0.7, abs=1e-12)
        assert m.iou == pytest.approx(0.5, abs=1e-12)
        assert m.kc == pytest.approx(0.4, abs=1e-12)

    def test_perfect_with_both_classes(self):
        m = compute_metrics(ConfusionCounts(tp=5, tn=5))
        assert (m.f1, m.oa, m.iou, m.kc) == (1.0, 1.0, 1.0, 1.0)

    def test_empty_positive_convention(self):
        m = compute_metrics(ConfusionCounts(tp=0, fp=0, fn=3, tn=7))
        assert m.precision == 0.0 and m.f1 == 0.0 and m.iou == 0.0

    def test_all_negative_perfect(self):
        m = compute_metrics(ConfusionCounts(tn=10))
        assert m.oa == 1.0 and m.kc == 1.0

    def test_empty_counts_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics(ConfusionCounts())

    def test_matches_naive_oracle_on_random_masks(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            h, w = rng.integers(1, 33, size=2)
            pred = rng.integers(0, 2, (h, w))
            gt = rng.integers(0, 2, (h, w))
            c = confusion(pred, gt)
            assert c == naive_confusion(pred, gt)
            m = compute_metrics(c)
            f1, pre, rec, oa, kc, iou = naive_metrics(c)
            for got, want in ((m.f1, f1), (m.precision, pre), (m.recall, rec),
                              (m.oa, oa), (m.kc, kc), (m.iou, iou)):
                assert got == pytest.approx(want, abs=1e-9)

    @given(tp=st.integers(0, 1000), tn=st.integers(0, 1000),
           fp=st.integers(0, 1000), fn=st.integers(0, 1000))
    @settings(max_examples=300, deadline=None)
    def test_invariants(self, tp, tn, fp, fn):
        c = ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)
        if c.total == 0:
            return
        m = compute_metrics(c)
        # KC never exceeds OA
        assert m.kc <= m.oa + 1e-12
        # F1 and IoU agree through the harmonic identity when both defined
        if m.iou > 0:
            assert m.f1 == pytest.approx(2 * m.iou / (1 + m.iou), abs=1e-9)
        assert 0.0 <= m.f1 <= 1.0 and -1.0 <= m.kc <= 1.0

    def test_kc_equals_oa_when_chance_is_zero(self):
        # all predictions positive, all ground truth negative: chance term = 0
        m = compute_metrics(ConfusionCounts(fp=10))
        assert m.kc == m.oa == 0.0


class TestRendering:
    def test_all_ones_is_white(self):
        ones = np.ones((3, 3), dtype=np.uint8)
        img = render_confusion_map(ones, ones)
        assert (img == np.array(TP_COLOR)).all()

    def test_two_by_two_has_one_pixel_per_color(self):
        pred = np.array([[1, 0], [1, 0]])
        gt = np.array([[1, 1], [0, 0]])
        img = render_confusion_map(pred, gt)
        for color in (TP_COLOR, TN_COLOR, FP_COLOR, FN_COLOR):
            assert (img == np.array(color)).all(axis=-1).sum() == 1

    def test_histogram_matches_counts(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pred = rng.integers(0, 2, (16, 16))
            gt = rng.integers(0, 2, (16, 16))
            img = render_confusion_map(pred, gt)
            c = confusion(pred, gt)
            counts = {TP_COLOR: c.tp, TN_COLOR: c.tn, FP_COLOR: c.fp, FN_COLOR: c.fn}
            for color, n in counts.items():
                assert (img == np.array(color)).all(axis=-1).sum() == n


class TestReport:
    def test_percent_formatting(self):
        assert format_percent(0.80934) == "80.93"
        assert format_percent(1.0) == "100.00"

    def test_csv_layout(self, tmp_path):
        m = compute_metrics(ConfusionCounts(tp=3, fp=1, fn=2, tn=4))
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, [("val", 0.05, "best_student", m)])
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(METRICS_CSV_HEADER)
        assert lines[1] == "val,0.05,best_student,66.67,75.00,60.00,70.00,40.00,50.00"
