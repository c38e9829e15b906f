import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from sipmask.losses import alignment_weight, focal_loss, iou_loss, ltrb_iou, mask_loss, total_loss
from sipmask.numerics import NonFiniteError, grad_check


def f64(*v):
    return torch.tensor(v, dtype=torch.float64)


def _closed_form_focal(z, y, gamma=2.0, alpha=0.25):
    p = 1 / (1 + math.exp(-z))
    if y:
        return alpha * (1 - p) ** gamma * -math.log(p)
    return (1 - alpha) * p ** gamma * -math.log(1 - p)


def test_focal_perfect_logits():
    logits = f64(20.0, -20.0, -20.0)
    targets = f64(1.0, 0.0, 0.0)
    assert float(focal_loss(logits, targets)) < 1e-12


def test_focal_degenerates_to_half_bce():
    logits = f64(0.3, -1.0, 2.0)
    targets = f64(1.0, 0.0, 0.0)
    bce = F.binary_cross_entropy_with_logits(logits, targets, reduction="sum")
    assert float(focal_loss(logits, targets, gamma=0.0, alpha=0.5)) == pytest.approx(0.5 * float(bce))


def test_focal_single_location_closed_form():
    z = math.log(0.6 / 0.4)  # sigmoid(z) = 0.6
    got = float(focal_loss(f64(z), f64(1.0)))
    assert got == pytest.approx(0.25 * 0.4 ** 2 * -math.log(0.6), rel=1e-12)


@given(st.lists(st.tuples(st.floats(-8, 8), st.booleans()), min_size=1, max_size=10))
def test_focal_matches_scalar_formula(pairs):
    logits = f64(*[z for z, _ in pairs])
    targets = f64(*[float(y) for _, y in pairs])
    want = sum(_closed_form_focal(z, y) for z, y in pairs) / max(sum(y for _, y in pairs), 1)
    assert float(focal_loss(logits, targets)) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_focal_no_positives_normalises_by_one():
    got = float(focal_loss(f64(0.0, 1.0), f64(0.0, 0.0)))
    assert got == pytest.approx(_closed_form_focal(0.0, False) + _closed_form_focal(1.0, False))


def test_iou_loss_examples():
    gt = f64(4.0, 6.0, 2.0, 8.0)[None]
    assert float(iou_loss(gt.clone(), gt)) == pytest.approx(0.0, abs=1e-15)
    # half the extent on every side of the same point: a quarter of the area
    assert float(iou_loss(gt / 2, gt)) == pytest.approx(-math.log(1 / 4))
    with pytest.raises(ValueError):
        iou_loss(gt, torch.zeros(1, 4, dtype=torch.float64))
    assert float(iou_loss(torch.zeros(0, 4), torch.zeros(0, 4))) == 0.0


def test_ltrb_iou_is_box_iou():
    # point at origin; boxes (-1,-1,1,1) and (0,-1,2,1)
    got = ltrb_iou(f64(1, 1, 1, 1)[None], f64(0, 1, 2, 1)[None])
    assert float(got) == pytest.approx(2 / 6)


def test_alignment_weight_examples():
    assert alignment_weight(1.0, 1.0) == 1.0
    assert alignment_weight(0.5, 0.8) == pytest.approx(0.4)
    assert alignment_weight(0.0, 0.77) == 0.0
    w = alignment_weight(torch.tensor(0.5, requires_grad=True), torch.tensor(0.5))
    assert not w.requires_grad


@given(o1=st.floats(0, 1), o2=st.floats(0, 1), s=st.floats(0, 1))
def test_alignment_weight_monotone_and_bounded(o1, o2, s):
    lo, hi = sorted((o1, o2))
    assert alignment_weight(lo, s) <= alignment_weight(hi, s)
    assert alignment_weight(s, lo) <= alignment_weight(s, hi)
    assert 0.0 <= alignment_weight(o1, s) <= 1.0


def _half_gt():
    gt = torch.zeros(1, 4, 4, dtype=torch.float64)
    gt[0, :2] = 1
    return gt


def test_mask_loss_examples():
    region = torch.ones(1, 4, 4, dtype=torch.bool)
    gt = _half_gt()
    assert float(mask_loss(gt.clone(), gt, region)) < 1e-5
    soft = torch.full((1, 4, 4), 0.5, dtype=torch.float64)
    assert float(mask_loss(soft, gt, region, f64(0.0))) == 0.0
    alpha = 0.37
    assert float(mask_loss(soft, gt, region, f64(alpha))) == pytest.approx(alpha * -math.log(0.5))


def test_mask_loss_uses_region_only():
    region = torch.zeros(1, 4, 4, dtype=torch.bool)
    region[0, 1:3, 1:3] = True
    soft = torch.full((1, 4, 4), 0.9, dtype=torch.float64)
    soft[0, 0, 0] = 0.01  # outside the region; must not matter
    gt = torch.ones(1, 4, 4, dtype=torch.float64)
    assert float(mask_loss(soft, gt, region)) == pytest.approx(-math.log(0.9))
    with pytest.raises(ValueError):
        mask_loss(soft, gt, torch.zeros_like(region))


@given(o_lo=st.floats(0.01, 0.98), gap=st.floats(0.001, 0.5), s=st.floats(0.05, 1.0), seed=st.integers(0, 999))
def test_higher_overlap_contributes_strictly_more(o_lo, gap, s, seed):
    o_hi = min(o_lo + gap, 1.0)
    g = torch.Generator().manual_seed(seed)
    soft = torch.rand(1, 5, 5, generator=g, dtype=torch.float64) * 0.9 + 0.05
    gt = (torch.rand(1, 5, 5, generator=g, dtype=torch.float64) > 0.5).to(torch.float64)
    region = torch.ones(1, 5, 5, dtype=torch.bool)
    lo = mask_loss(soft, gt, region, alignment_weight(f64(o_lo), f64(s)).reshape(1))
    hi = mask_loss(soft, gt, region, alignment_weight(f64(o_hi), f64(s)).reshape(1))
    assert float(hi) > float(lo)


def test_unit_weights_recover_plain_bce():
    g = torch.Generator().manual_seed(0)
    soft = torch.rand(3, 4, 4, generator=g, dtype=torch.float64) * 0.9 + 0.05
    gt = (torch.rand(3, 4, 4, generator=g, dtype=torch.float64) > 0.5).to(torch.float64)
    region = torch.ones(3, 4, 4, dtype=torch.bool)
    plain = F.binary_cross_entropy(soft, gt)
    assert float(mask_loss(soft, gt, region, torch.ones(3, dtype=torch.float64))) == pytest.approx(float(plain))
    assert float(mask_loss(soft, gt, region)) == pytest.approx(float(plain))


def test_total_loss():
    z = torch.zeros((), dtype=torch.float64)
    assert float(total_loss(z, z, z, 0).total) == 0.0
    rep = total_loss(f64(1.0), f64(2.0), f64(0.5), 3)
    assert float(rep.total) == 3.5
    assert rep.as_row() == {"l_cls": 1.0, "l_reg": 2.0, "l_mask": 0.5, "total": 3.5}
    with pytest.raises(NonFiniteError):
        total_loss(f64(float("nan")), z, z, 1)


def test_loss_gradients():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(5, 3, generator=g, dtype=torch.float64)
    targets = (torch.rand(5, 3, generator=g) > 0.6).to(torch.float64)
    assert grad_check(lambda z: focal_loss(z, targets), [logits]).passed
    gt = torch.rand(4, 4, generator=g, dtype=torch.float64) * 3 + 1
    assert grad_check(lambda p: iou_loss(p, gt), [gt + 0.3]).passed
    soft = torch.rand(2, 3, 3, generator=g, dtype=torch.float64) * 0.8 + 0.1
    gtm = (torch.rand(2, 3, 3, generator=g) > 0.5).to(torch.float64)
    region = torch.ones(2, 3, 3, dtype=torch.bool)
    assert grad_check(lambda s: mask_loss(s, gtm, region, f64(0.3, 0.9)), [soft]).passed
