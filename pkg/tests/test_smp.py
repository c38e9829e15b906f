import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sipmask.geometry import Box, prune_support, subregion_grid
from sipmask.smp import (assemble_instance, assemble_mask_logits, assemble_masks, assemble_masks_dense,
                         assemble_region_maps, binarize, box_mask_logits, single_coefficient_masks, smp_oracle)


def _case(seed, h=None, w=None, p=None, m=None, k=None):
    r = np.random.default_rng(seed)
    h = h or int(r.integers(1, 33))
    w = w or int(r.integers(1, 33))
    p = int(r.integers(0, 9)) if p is None else p
    m = m or int(r.integers(1, 9))
    k = k or int(r.integers(1, 4))
    basis = r.normal(size=(h, w, m))
    coeffs = r.normal(size=(p, k * k, m))
    x1 = r.uniform(-4, w, p)
    y1 = r.uniform(-4, h, p)
    boxes = np.stack([x1, y1, x1 + r.uniform(0, w, p), y1 + r.uniform(0, h, p)], axis=1)
    return basis, coeffs, boxes, k


def test_region_map_closed_form():
    basis = torch.zeros(3, 4, 2, dtype=torch.float64)
    basis[..., 0] = 1
    maps = assemble_region_maps(basis, torch.tensor([[2.0], [5.0]], dtype=torch.float64))
    assert torch.allclose(maps, torch.full((3, 4, 1), 1 / (1 + math.exp(-2)), dtype=torch.float64))
    assert float(maps[0, 0, 0]) == pytest.approx(0.88079, abs=1e-5)


def test_region_map_zero_coefficients_and_empty():
    basis = torch.randn(3, 4, 2, dtype=torch.float64)
    assert torch.equal(assemble_region_maps(basis, torch.zeros(2, 3, dtype=torch.float64)),
                       torch.full((3, 4, 3), 0.5, dtype=torch.float64))
    assert assemble_region_maps(basis, torch.zeros(2, 0, dtype=torch.float64)).shape == (3, 4, 0)
    with pytest.raises(ValueError):
        assemble_region_maps(basis, torch.zeros(3, 1, dtype=torch.float64))


@given(seed=st.integers(0, 10 ** 6), step=st.floats(0.01, 3.0), sign=st.sampled_from([-1.0, 1.0]))
def test_region_map_monotone_along_fixed_sign_direction(seed, step, sign):
    r = np.random.default_rng(seed)
    basis = torch.from_numpy(np.abs(r.normal(size=(4, 4, 3))) * sign)
    c = torch.from_numpy(r.normal(size=(3, 1)))
    direction = torch.from_numpy(np.abs(r.normal(size=(3, 1))))
    lo = assemble_region_maps(basis, c)
    hi = assemble_region_maps(basis, c + step * direction)
    assert bool(((hi - lo) * sign >= 0).all())


def test_assemble_instance_examples():
    maps = [torch.rand(6, 6, dtype=torch.float64) for _ in range(4)]
    box = Box(0.7, 1.2, 5.3, 4.9)
    k1 = assemble_instance(box, maps[:1], 1)
    assert torch.equal(k1, prune_support(maps[0], box))
    same = assemble_instance(box, [maps[0]] * 4, 2)
    assert torch.equal(same, prune_support(maps[0], box))
    with pytest.raises(ValueError):
        assemble_instance(box, maps[:3], 2)


def test_quadrant_constant_map():
    maps = [torch.full((4, 4), float(i)) for i in range(4)]
    got = assemble_instance(Box(0, 0, 4, 4), maps, 2)
    want = torch.tensor([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]], dtype=torch.float32)
    assert torch.equal(got, want)


def test_binarize_examples():
    assert binarize(np.full((2, 2), 0.88)).all()
    assert binarize(np.full((2, 2), 0.5), 0.5).all()
    assert not binarize(np.full((2, 2), 0.99), 1.1).any()
    assert binarize(torch.tensor([0.2, 0.5])).tolist() == [0, 1]


def test_empty_detections():
    basis = torch.randn(5, 5, 3, dtype=torch.float64)
    assert assemble_masks(basis, torch.zeros(0, 4, 3, dtype=torch.float64), np.zeros((0, 4)), 2).shape == (0, 5, 5)
    assert smp_oracle(basis.numpy(), np.zeros((0, 4, 3)), np.zeros((0, 4)), 2) == ([], [])


@given(seed=st.integers(0, 10 ** 6))
def test_batched_matches_oracle(seed):
    basis, coeffs, boxes, k = _case(seed, p=None)
    got = assemble_masks(torch.from_numpy(basis), torch.from_numpy(coeffs), boxes, k).numpy()
    soft, binary = smp_oracle(basis, coeffs, boxes, k)
    if len(soft):
        np.testing.assert_allclose(got, np.array(soft), atol=1e-6, rtol=0)
        assert np.array_equal(binarize(got), np.array(binary, dtype=np.uint8))


@given(seed=st.integers(0, 10 ** 6))
def test_dense_and_cell_paths_agree(seed):
    basis, coeffs, boxes, k = _case(seed, p=3)
    b, c = torch.from_numpy(basis), torch.from_numpy(coeffs)
    torch.testing.assert_close(assemble_masks(b, c, boxes, k), assemble_masks_dense(b, c, boxes, k),
                               atol=1e-12, rtol=0)


@given(seed=st.integers(0, 10 ** 6))
def test_zero_outside_box(seed):
    basis, coeffs, boxes, k = _case(seed, p=4)
    soft = assemble_masks(torch.from_numpy(basis), torch.from_numpy(coeffs), boxes, k).numpy()
    for j, bx in enumerate(boxes):
        outside = ~np.asarray(prune_support(np.ones(soft.shape[1:], dtype=bool), Box(*bx)))
        assert not soft[j][outside].any()


def test_box_mask_logits_agree_with_dense():
    basis, coeffs, boxes, k = _case(3, h=12, w=14, p=2, m=4, k=2)
    b, c = torch.from_numpy(basis), torch.from_numpy(coeffs)
    dense, inside = assemble_mask_logits(b, c, boxes, k)
    logits, pixels = box_mask_logits(b, c[:1], boxes[0], k)
    assert pixels.shape[0] == int(inside[0].sum())
    torch.testing.assert_close(logits[0], dense[0][pixels[:, 0], pixels[:, 1]])


@given(seed=st.integers(0, 10 ** 6))
def test_k1_is_bit_identical_to_single_coefficient_path(seed):
    basis, coeffs, boxes, _ = _case(seed, k=1)
    b, c = torch.from_numpy(basis), torch.from_numpy(coeffs)
    assert torch.equal(assemble_masks(b, c, boxes, 1), single_coefficient_masks(b, c, boxes))


def test_k2_is_four_quadrant_formulation():
    basis, coeffs, boxes, _ = _case(9, h=10, w=10, p=3, m=3, k=2)
    b = torch.from_numpy(basis)
    got = assemble_masks(b, torch.from_numpy(coeffs), boxes, 2)
    for j, bx in enumerate(boxes):
        maps = [assemble_region_maps(b, torch.from_numpy(coeffs[j, i][:, None]))[..., 0] for i in range(4)]
        quads = subregion_grid(Box(*bx), 2).regions
        want = sum(prune_support(mp, q) for mp, q in zip(maps, quads))
        torch.testing.assert_close(got[j], want, atol=1e-12, rtol=0)


def test_shape_validation():
    basis = torch.zeros(4, 4, 3, dtype=torch.float64)
    with pytest.raises(ValueError):
        assemble_masks(basis, torch.zeros(1, 3, 3, dtype=torch.float64), np.zeros((1, 4)), 2)
    with pytest.raises(ValueError):
        assemble_masks(basis, torch.zeros(2, 4, 3, dtype=torch.float64), np.zeros((1, 4)), 2)
