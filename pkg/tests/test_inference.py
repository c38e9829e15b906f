import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sipmask.config import Config
from sipmask.geometry import box_iou_matrix
from sipmask.heads import SipMaskNet
from sipmask.inference import infer, infer_batch, masks_to_image_resolution, nms, select_top

from oracles import greedy_nms_oracle


def test_nms_identical_boxes():
    assert nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.8]).tolist() == [0]


def test_nms_disjoint_boxes():
    assert nms([[0, 0, 1, 1], [5, 5, 6, 6], [9, 9, 10, 10]], [0.1, 0.3, 0.2]).tolist() == [1, 2, 0]


def test_nms_three_box_chain():
    a, b, c = [0, 0, 10, 10], [2.5, 0, 12.5, 10], [5, 0, 15, 10]
    ious = box_iou_matrix([a, b, c], [a, b, c])
    assert ious[0, 1] > 0.5 and ious[1, 2] > 0.5 and ious[0, 2] < 0.5
    scores = [0.9, 0.8, 0.7]
    got = nms([a, b, c], scores).tolist()
    assert got == greedy_nms_oracle([a, b, c], scores, [0, 0, 0], 0.5) == [0, 2]
    # with the middle box on top it suppresses both neighbours
    assert nms([a, b, c], [0.8, 0.9, 0.7]).tolist() == [1]


def test_nms_is_per_class():
    assert nms([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.8], [0, 1]).tolist() == [0, 1]


@st.composite
def detections(draw):
    n = draw(st.integers(0, 12))
    boxes = []
    for _ in range(n):
        x1, y1 = draw(st.floats(0, 20)), draw(st.floats(0, 20))
        boxes.append([x1, y1, x1 + draw(st.floats(0.5, 10)), y1 + draw(st.floats(0.5, 10))])
    scores = [draw(st.sampled_from([0.1, 0.2, 0.5, 0.7, 0.9])) for _ in range(n)]
    classes = [draw(st.integers(0, 1)) for _ in range(n)]
    return boxes, scores, classes


@given(detections(), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_matches_greedy_oracle(dets, thr):
    boxes, scores, classes = dets
    keep = nms(boxes, scores, classes, thr).tolist()
    assert keep == greedy_nms_oracle(boxes, scores, classes, thr)
    kept = np.asarray(boxes).reshape(-1, 4)[keep]
    ious = box_iou_matrix(kept, kept)
    for i in range(len(keep)):
        for j in range(i + 1, len(keep)):
            if classes[keep[i]] == classes[keep[j]]:
                assert ious[i, j] <= thr


def test_select_top():
    assert sorted(select_top([0.3, 0.9, 0.1]).tolist()) == [0, 1, 2]
    scores = np.random.default_rng(0).random(150)
    top = select_top(scores, 100)
    assert len(top) == 100
    assert (np.diff(scores[top]) <= 0).all()
    assert select_top([0.5, 0.5, 0.7], 2).tolist() == [2, 0]


@pytest.fixture(scope="module")
def untrained():
    torch.manual_seed(0)
    cfg = Config()
    model = SipMaskNet(cfg.model).eval()
    with torch.no_grad():
        model.cls_out.bias.fill_(0.0)  # make plenty of candidates survive the score filter
    return cfg, model


def test_high_threshold_gives_nothing(untrained):
    cfg, model = untrained
    image = np.random.default_rng(0).random((64, 64, 3)).astype(np.float32)
    assert infer(image, model, cfg.replace(infer={"score_threshold": 0.999})) == []


def test_infer_deterministic_and_bounded(untrained):
    cfg, model = untrained
    image = np.random.default_rng(1).random((64, 64, 3)).astype(np.float32)
    a = infer(image, model, cfg)
    b = infer(image, model, cfg)
    assert 0 < len(a) <= 100
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert np.array_equal(x.binary, y.binary) and x.score == y.score
    scores = [mk.score for mk in a]
    assert scores == sorted(scores, reverse=True)


def test_batched_and_oracle_paths_give_identical_masks(untrained):
    cfg, model = untrained
    cfg = cfg.replace(infer={"top_n": 6})
    images = np.random.default_rng(2).random((2, 64, 64, 3)).astype(np.float32)
    fast = infer_batch(images, model, cfg, smp_path="batched")
    slow = infer_batch(images, model, cfg, smp_path="oracle")
    for fa, sl in zip(fast, slow):
        assert len(fa) == len(sl) > 0
        for x, y in zip(fa, sl):
            assert np.array_equal(x.binary, y.binary)
            np.testing.assert_allclose(x.soft, y.soft, atol=1e-9)
    with pytest.raises(ValueError):
        infer_batch(images, model, cfg, smp_path="nope")


def test_masks_outside_box_are_zero(untrained):
    cfg, model = untrained
    image = np.random.default_rng(3).random((64, 64, 3)).astype(np.float32)
    for mk in infer(image, model, cfg):
        ys, xs = np.nonzero(mk.soft)
        if len(ys):
            assert (xs + 0.5 >= mk.box.x1).all() and (xs + 0.5 < mk.box.x2).all()
            assert (ys + 0.5 >= mk.box.y1).all() and (ys + 0.5 < mk.box.y2).all()
    full = masks_to_image_resolution(infer(image, model, cfg)[:2], (64, 64))
    assert all(m.shape == (64, 64) for m in full)
