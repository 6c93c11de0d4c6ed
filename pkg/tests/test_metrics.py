import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lvseg.errors import EmptyMask, ShapeMismatch
from lvseg.metrics import (aggregate_distances, boundary_distances, boundary_mask,
                           confusion_metrics, dice, evaluate_masks, extract_boundary, jaccard)

from oracles import all_pairs_distances, boundary_points

masks8 = arrays(np.bool_, (8, 8))


def square(r, c, n=3, shape=(10, 10)):
    m = np.zeros(shape, dtype=bool)
    m[r:r + n, c:c + n] = True
    return m


def test_overlap_closed_forms():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, :4] = True
    b[0, 2:] = True
    b[1, :2] = True
    assert dice(a, b) == 0.5
    assert jaccard(a, b) == pytest.approx(1 / 3, abs=1e-15)
    assert dice(a, a) == 1.0 and jaccard(a, a) == 1.0
    assert dice(a, ~a) == 0.0 and jaccard(a, ~a) == 0.0


def test_both_empty_is_one():
    z = np.zeros((3, 3), bool)
    assert dice(z, z) == 1.0 and jaccard(z, z) == 1.0
    assert dice(z, ~z) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


def test_confusion_closed_forms():
    truth = np.zeros((4, 4), bool)
    truth[:2] = True
    m = confusion_metrics(truth, truth)
    assert all(m[k] == 1.0 for k in ("precision", "recall", "f1", "accuracy", "specificity"))
    assert m["mae"] == 0.0
    m = confusion_metrics(np.ones((4, 4), bool), truth)
    assert (m["precision"], m["recall"], m["specificity"]) == (0.5, 1.0, 0.0)
    m = confusion_metrics(~truth, truth)
    assert m["accuracy"] == 0.0 and m["mae"] == 1.0


def test_confusion_zero_denominators():
    z = np.zeros((3, 3), bool)
    m = confusion_metrics(z, z)
    assert m["precision"] == 0.0 and m["recall"] == 0.0 and m["f1"] == 0.0
    assert m["specificity"] == 1.0


def test_extract_boundary_examples():
    one = np.zeros((5, 5), bool)
    one[2, 2] = True
    assert extract_boundary(one) == {(2, 2)}
    sq = square(1, 1, shape=(5, 5))
    assert len(extract_boundary(sq)) == 8
    assert (2, 2) not in extract_boundary(sq)
    line = np.zeros((5, 5), bool)
    line[2, :] = True
    assert extract_boundary(line) == {(2, c) for c in range(5)}
    with pytest.raises(EmptyMask):
        extract_boundary(np.zeros((2, 2), bool))


def test_image_border_counts_as_background():
    assert boundary_mask(np.ones((3, 3), bool)).sum() == 8


def test_distances_examples():
    a = np.zeros((5, 5), bool)
    b = np.zeros((5, 5), bool)
    a[0, 0] = True
    b[3, 4] = True
    assert boundary_distances(a, b) == {"hausdorff": 5.0, "mad": 5.0, "bde": 5.0}
    sq = square(2, 2)
    assert boundary_distances(sq, sq) == {"hausdorff": 0.0, "mad": 0.0, "bde": 0.0}


def test_unit_shifted_squares_match_oracle():
    a, b = square(2, 2), square(3, 2)
    assert boundary_distances(a, b) == all_pairs_distances(a, b)
    b = square(3, 3)
    assert boundary_distances(a, b) == all_pairs_distances(a, b)


def test_bde_is_one_directional():
    a = square(2, 2, n=2)
    b = square(2, 2, n=6)
    ab, ba = boundary_distances(a, b), boundary_distances(b, a)
    assert ab["bde"] != ba["bde"]
    assert ab["hausdorff"] == ba["hausdorff"] and ab["mad"] == ba["mad"]


def test_evaluate_masks_nan_distances_on_empty():
    z = np.zeros((4, 4), bool)
    rep = evaluate_masks(z, square(0, 0, shape=(4, 4)))
    assert math.isnan(rep.hausdorff) and rep.dice == 0.0
    assert set(rep.as_dict()) >= {"dice", "mae", "bde"}


def test_aggregate_distances():
    out = aggregate_distances(np.array([0.0, 2.0]), np.array([1.0]))
    assert out == {"hausdorff": 2.0, "mad": 1.0, "bde": 1.0}


@settings(max_examples=200, deadline=None)
@given(masks8, masks8)
def test_jaccard_dice_identity_and_symmetry(a, b):
    d, j = dice(a, b), jaccard(a, b)
    assert abs(j - d / (2 - d)) <= 1e-12
    assert d == dice(b, a) and j == jaccard(b, a)
    for v in confusion_metrics(a, b).values():
        assert 0 <= v <= 1


@settings(max_examples=200, deadline=None)
@given(masks8, masks8)
def test_distance_properties(a, b):
    if not a.any() or not b.any():
        return
    ab, ba = boundary_distances(a, b), boundary_distances(b, a)
    assert ab["mad"] <= ab["hausdorff"] + 1e-12
    assert ab["hausdorff"] == ba["hausdorff"]
    assert ab["mad"] == pytest.approx(ba["mad"], abs=1e-12)
    same = set(boundary_points(a)) == set(boundary_points(b))
    assert (ab["hausdorff"] == 0) == same
    assert (ab["mad"] == 0) == same
    assert ab == all_pairs_distances(a, b)
