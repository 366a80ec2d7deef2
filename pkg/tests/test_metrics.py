import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oclttt.errors import ContractError
from oclttt.metrics import (accumulated_miou, class_ratio, collapse_detector, confusion_matrix,
                            histogram_entropy, iou_per_class, miou)


def set_oracle(gt, pred, c):
    """Per-class IoU from explicit pixel-index sets; None for undefined classes."""
    g = {k: {i for i, v in enumerate(gt.ravel()) if v == k} for k in range(c)}
    p = {k: {i for i, v in enumerate(pred.ravel()) if v == k} for k in range(c)}
    out = []
    for k in range(c):
        union = g[k] | p[k]
        out.append(None if not union else len(g[k] & p[k]) / len(union))
    return out


def test_iou_examples():
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    np.testing.assert_array_equal(iou_per_class(cm), [0.5, 2 / 3])
    assert miou(confusion_matrix([0, 1, 2], [0, 1, 2], 3)) == 1.0
    assert iou_per_class(confusion_matrix([0, 0], [1, 1], 2)).tolist() == [0.0, 0.0]


def test_undefined_classes_excluded():
    cm = confusion_matrix([0, 0, 1], [0, 0, 1], 5)
    iou = iou_per_class(cm)
    assert np.isnan(iou[2:]).all()
    assert miou(cm) == 1.0


def test_miou_empty():
    with pytest.raises(ContractError):
        miou(np.zeros((3, 3), dtype=np.int64))
    with pytest.raises(ContractError):
        accumulated_miou([])


def test_confusion_total():
    rng = np.random.default_rng(0)
    gt, pred = rng.integers(0, 4, (8, 8)), rng.integers(0, 4, (8, 8))
    assert confusion_matrix(gt, pred, 4).sum() == 64


@pytest.mark.parametrize("seed", range(100))
def test_iou_matches_set_oracle(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 7))
    gt, pred = rng.integers(0, c, (8, 8)), rng.integers(0, c, (8, 8))
    if seed % 3 == 0:
        pred = np.where(rng.random((8, 8)) < 0.7, gt, pred)
    oracle = set_oracle(gt, pred, c)
    iou = iou_per_class(confusion_matrix(gt, pred, c))
    for got, want in zip(iou, oracle):
        if want is None:
            assert math.isnan(got)
        else:
            assert got == want
    defined = [v for v in oracle if v is not None]
    assert miou(confusion_matrix(gt, pred, c)) == pytest.approx(sum(defined) / len(defined), abs=0, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_miou_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.integers(0, 5, (8, 8)), rng.integers(0, 5, (8, 8))
    perm = rng.permutation(5)
    a = iou_per_class(confusion_matrix(gt, pred, 5))
    b = iou_per_class(confusion_matrix(perm[gt], perm[pred], 5))
    np.testing.assert_array_equal(a, b[perm])
    assert miou(confusion_matrix(gt, pred, 5)) == pytest.approx(miou(confusion_matrix(perm[gt], perm[pred], 5)), abs=1e-15)


def test_accumulated_pools_counts():
    rng = np.random.default_rng(1)
    cms = [confusion_matrix(rng.integers(0, 3, 16), rng.integers(0, 3, 16), 3) for _ in range(12)]
    curve = accumulated_miou(cms)
    for n in range(12):
        assert curve[n] == miou(sum(cms[: n + 1]))
    assert curve[-1] == miou(np.sum(cms, axis=0))


def test_accumulated_constant_curve():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 2, 2], 3)
    curve = accumulated_miou([cm] * 5)
    assert len(set(curve)) == 1


def test_class_ratio_examples():
    r = class_ratio(np.zeros((4, 4), dtype=int), 3)
    assert r.tolist() == [1.0, 0.0, 0.0] and histogram_entropy(r) == 0.0
    uniform = class_ratio(np.arange(12).reshape(3, 4) % 4, 4)
    assert histogram_entropy(uniform) == pytest.approx(math.log(4), abs=1e-15)
    assert histogram_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-15)
    assert histogram_entropy([0.5, 0.25, 0.25]) == pytest.approx(1.0397, abs=1e-4)


def test_class_ratio_from_probabilities():
    probs = np.zeros((2, 3, 3))
    probs[..., 1] = 0.6
    probs[..., 2] = 0.4
    probs[0, 0] = [0.9, 0.05, 0.05]
    r = class_ratio([probs, probs], 3)
    assert r.tolist() == pytest.approx([2 / 12, 10 / 12, 0.0])
    assert abs(r.sum() - 1) <= 1e-9


def test_collapse_single_class_from_k():
    k = 7
    ents = [1.2] * k + [0.0] * 30
    assert collapse_detector(ents, 1.2) == (True, k + 9)


def test_collapse_never_flags():
    ents = [1.2, 1.1, 1.3] * 10
    assert collapse_detector(ents, 1.2) == (False, None)
    assert collapse_detector([0.0] * 30, 1.2, fraction=0.0) == (False, None)


def test_collapse_run_resets():
    ents = [0.0] * 9 + [1.0] + [0.0] * 9
    assert collapse_detector(ents, 1.0) == (False, None)
