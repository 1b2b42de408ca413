import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stenoseg.errors import ShapeError
from stenoseg.metrics import (
    ConfusionCounts,
    aggregate,
    confusion,
    f1_from,
    precision_recall_f1,
    report_csv,
    thresholded_mask,
)

# precision, recall and the rounded F1 for each reference model row
TABLE_ROWS = [
    ("Swin UNetR", 0.4912, 0.2829, 0.359),
    ("LightM-UNet", 0.4893, 0.3326, 0.396),
    ("Swin-UMamba D", 0.6869, 0.6378, 0.6614),
    ("Swin-UMamba", 0.6887, 0.6488, 0.6682),
    ("U-Mamba ENC", 0.7113, 0.6618, 0.6857),
    ("U-Mamba BOT", 0.6992, 0.6769, 0.6879),
]


@pytest.mark.parametrize("name,P,R,F1", TABLE_ROWS)
def test_table_rows_reproduce(name, P, R, F1):
    assert abs(f1_from(P, R) - F1) <= 5e-4


def test_table_examples_tight():
    assert abs(f1_from(0.6992, 0.6769) - 0.6879) <= 1e-4
    assert abs(f1_from(0.4912, 0.2829) - 0.3591) <= 5e-4


def scalar_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def test_confusion_trivial_cases(rng):
    gt = rng.integers(0, 2, size=(16, 16))
    gt[0, 0] = 1
    same = confusion(gt, gt)
    assert same.fp == same.fn == 0
    inv = confusion(1 - gt, gt)
    assert inv.tp == inv.tn == 0


def test_confusion_scalar_oracle(rng):
    for _ in range(20):
        pred, gt = rng.integers(0, 2, size=(2, 16, 16))
        c = confusion(pred, gt)
        assert c == scalar_confusion(pred, gt)
        assert c.total == 256


def test_confusion_errors():
    with pytest.raises(ShapeError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        confusion(np.full((2, 2), 2), np.zeros((2, 2)))


def test_both_empty_is_undefined():
    c = confusion(np.zeros((4, 4)), np.zeros((4, 4)))
    assert precision_recall_f1(c) == (None, None, None)
    rep = aggregate({"empty": c, "hit": ConfusionCounts(1, 0, 0, 15)})
    assert rep.defined_images() == ["hit"]
    assert rep.f1 == 1.0


def test_micro_example():
    rep = aggregate({"a": ConfusionCounts(1, 0, 1, 0), "b": ConfusionCounts(1, 1, 0, 0)})
    assert rep.precision == pytest.approx(2 / 3, abs=1e-15)
    assert rep.recall == pytest.approx(2 / 3, abs=1e-15)
    assert rep.f1 == pytest.approx(2 / 3, abs=1e-15)


def test_single_image_aggregate():
    c = ConfusionCounts(3, 2, 4, 7)
    assert (aggregate({"x": c}).precision, aggregate({"x": c}).recall) == precision_recall_f1(c)[:2]
    with pytest.raises(ValueError):
        aggregate({})


def test_aggregate_scalar_oracle(rng):
    per = {f"i{k}": ConfusionCounts(*map(int, rng.integers(0, 50, 4))) for k in range(30)}
    tp = sum(c.tp for c in per.values())
    fp = sum(c.fp for c in per.values())
    fn = sum(c.fn for c in per.values())
    rep = aggregate(per)
    assert rep.precision == tp / (tp + fp)
    assert rep.recall == tp / (tp + fn)


counts = st.builds(ConfusionCounts, *(st.integers(0, 1000) for _ in range(4)))


@given(counts)
def test_harmonic_bounds(c):
    P, R, F = precision_recall_f1(c)
    if F is not None:
        assert min(P, R) - 1e-12 <= F <= max(P, R) + 1e-12
        assert F == pytest.approx(2 * P * R / (P + R))


@given(st.lists(counts, min_size=1, max_size=8), st.randoms())
def test_micro_permutation_invariant(cs, rnd):
    a = aggregate({str(i): c for i, c in enumerate(cs)})
    shuffled = list(enumerate(cs))
    rnd.shuffle(shuffled)
    b = aggregate({str(i): c for i, c in shuffled})
    assert a.counts == b.counts and a.f1 == b.f1


def test_confusion_symmetry(rng):
    pred, gt = rng.integers(0, 2, size=(2, 9, 9))
    a, b = confusion(pred, gt), confusion(gt, pred)
    assert a.tp == b.tp and a.fp == b.fn and a.fn == b.fp


# ---------------------------------------------------------------- threshold
def test_tie_goes_to_foreground():
    assert thresholded_mask(np.zeros((2, 3, 3))).all()


def test_extreme_thresholds(rng):
    z = rng.normal(size=(2, 5, 5)) * 30
    assert thresholded_mask(z, 0.0).all()
    assert not thresholded_mask(z, 1.0001).any()


def test_half_threshold_is_argmax(rng):
    z = rng.normal(size=(3, 2, 8, 8))
    z[0, :, 0, 0] = 0.25  # a tie
    want = z[:, 1] >= z[:, 0]
    np.testing.assert_array_equal(thresholded_mask(z), want)


def test_threshold_rejects_multiclass():
    with pytest.raises(ShapeError):
        thresholded_mask(np.zeros((3, 4, 4)))


def test_report_csv_columns():
    rep = aggregate({"a": ConfusionCounts(1, 1, 0, 2)}, model="m", params=10)
    empty = aggregate({"b": ConfusionCounts(0, 0, 0, 4)}, model="e", params=3)
    lines = report_csv([rep, empty]).splitlines()
    assert lines[0] == "model,params,precision,recall,f1"
    assert lines[1] == "m,10,0.500000,1.000000,0.666667"
    assert lines[2] == "e,3,,,"
