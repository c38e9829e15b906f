import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from sipmask.config import DEFAULT_SCALE_WINDOWS
from sipmask.targets import BACKGROUND, assign_targets, level_points

STRIDES = [4, 8, 16, 32, 64]


def shapes_for(size):
    return [(size // s, size // s) for s in STRIDES]


def test_level_points():
    pts = level_points(2, 3, 4)
    assert pts[0, 0].tolist() == [2.0, 2.0]
    assert pts[1, 2].tolist() == [10.0, 6.0]


def test_single_cell_box():
    res = assign_targets([[4.5, 4.5, 7.5, 7.5]], [2], shapes_for(64), STRIDES)
    assert res.num_positive == 1
    p3 = res.levels[0]
    assert p3.labels[1, 1] == 2 and p3.gt_index[1, 1] == 0
    np.testing.assert_allclose(p3.ltrb[1, 1], [1.5, 1.5, 1.5, 1.5])


def test_nested_boxes_smaller_wins():
    big, small = [0, 0, 20, 20], [4, 4, 12, 12]
    res = assign_targets([big, small], [0, 1], shapes_for(64), STRIDES)
    p3 = res.levels[0]
    assert p3.labels[1, 1] == 1 and p3.gt_index[1, 1] == 1  # point (6, 6) is in both
    assert p3.labels[4, 4] == 0  # point (18, 18) only in the big box


def test_huge_box_goes_to_coarsest_level():
    res = assign_targets([[0, 0, 600, 600]], [0], shapes_for(640), STRIDES)
    counts = [int((lv.labels != BACKGROUND).sum()) for lv in res.levels]
    assert counts[:4] == [0, 0, 0, 0] and counts[4] > 0


def test_no_gts_all_background():
    res = assign_targets(np.zeros((0, 4)), [], shapes_for(64), STRIDES)
    assert res.num_positive == 0
    assert all((lv.gt_index == -1).all() for lv in res.levels)


@st.composite
def gt_sets(draw):
    n = draw(st.integers(1, 5))
    boxes = []
    for _ in range(n):
        x1, y1 = draw(st.floats(0, 60)), draw(st.floats(0, 60))
        boxes.append([x1, y1, min(x1 + draw(st.floats(1, 64)), 64), min(y1 + draw(st.floats(1, 64)), 64)])
    return np.array(boxes), np.array([draw(st.integers(0, 2)) for _ in range(n)])


@given(gt_sets())
def test_positives_lie_inside_their_box_and_window(gts):
    boxes, classes = gts
    res = assign_targets(boxes, classes, shapes_for(64), STRIDES)
    for lv, stride, (lo, hi) in zip(res.levels, STRIDES, DEFAULT_SCALE_WINDOWS):
        pts = level_points(*lv.labels.shape, stride)
        for y, x in zip(*np.nonzero(lv.labels != BACKGROUND)):
            g = lv.gt_index[y, x]
            px, py = pts[y, x]
            b = boxes[g]
            assert b[0] < px < b[2] and b[1] < py < b[3]
            assert lv.labels[y, x] == classes[g]
            ltrb = lv.ltrb[y, x]
            np.testing.assert_allclose(ltrb, [px - b[0], py - b[1], b[2] - px, b[3] - py])
            assert (ltrb > 0).all()
            assert ltrb.max() > lo and (hi is None or ltrb.max() <= hi)
